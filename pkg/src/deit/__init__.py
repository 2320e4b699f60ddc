"""Data-efficient image transformers at desk scale, on a small numpy autodiff core."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, desk_config
from .data import Dataset, load_cifar10, synth_dataset
from .distill import DistillConfig, Teacher, distillation_loss, joint_predict
from .errors import (ContractError, CorruptionError, DeiTError, FormatError, ParameterError,
                     ShapeError, UsageError, VersionError)
from .model import DeiTConfig, DeiTModel, param_count, preset
from .tensor import Tensor, no_grad, precision
from .train import train

__version__ = "0.1.0"
