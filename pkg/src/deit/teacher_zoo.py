"""Small in-repo teachers: an im2col convnet and a plain transformer."""
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .distill import Teacher
from .errors import ParameterError
from .model import TRUNC_CUTOFF, DeiTModel, ForwardOutput, ParameterSet, preset
from .tensor import Tensor

TEACHER_KINDS = ("convnet", "transformer")


@dataclass
class ConvNetConfig:
    channels: tuple = (16, 32, 64)
    strides: tuple = (1, 2, 2)
    kernel: int = 3
    num_classes: int = 10
    image_size: int = 32

    def to_dict(self):
        d = asdict(self)
        d["channels"], d["strides"] = list(self.channels), list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(channels=tuple(d["channels"]), strides=tuple(d["strides"]), kernel=d["kernel"],
                   num_classes=d["num_classes"], image_size=d["image_size"])


def conv2d(x, weight, bias, stride=1, pad=0):
    """Convolution as im2col + matmul; weight is C_out x (C_in * k * k)."""
    B, _, H, W = x.shape
    c_out = weight.shape[0]
    k = int(round((weight.shape[1] / x.shape[1]) ** 0.5))
    oh = (H + 2 * pad - k) // stride + 1
    ow = (W + 2 * pad - k) // stride + 1
    cols = T.im2col(x, k, stride, pad)
    y = cols @ T.transpose(weight) + bias
    return T.transpose(y.reshape(B, oh, ow, c_out), (0, 3, 1, 2))


def conv2d_reference(x, weight, bias, stride=1, pad=0):
    """Direct nested-loop convolution on arrays (test oracle)."""
    B, C, H, W = x.shape
    c_out = weight.shape[0]
    k = int(round((weight.shape[1] / C) ** 0.5))
    w = weight.reshape(c_out, C, k, k)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (H + 2 * pad - k) // stride + 1
    ow = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, c_out, oh, ow))
    for b in range(B):
        for o in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, o, i, j] = (patch * w[o]).sum() + bias[o]
    return out


class TinyConvNet(ParameterSet):
    """Three ReLU conv layers, global average pooling and a linear head."""

    resolution_agnostic = True

    def __init__(self, config, seed=0, rng=None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.convs = []
        c_in, k = 3, config.kernel
        for c_out in config.channels:
            std = (2.0 / (c_in * k * k)) ** 0.5
            w = T.init_truncated_normal((c_out, c_in * k * k), std, TRUNC_CUTOFF, rng)
            self.convs.append((w, Tensor(np.zeros(c_out), requires_grad=True)))
            c_in = c_out
        self.fc_w = T.init_truncated_normal((c_in, config.num_classes), 0.02, TRUNC_CUTOFF, rng)
        self.fc_b = Tensor(np.zeros(config.num_classes), requires_grad=True)

    @property
    def resolution(self):
        return self.config.image_size

    def named_parameters(self):
        out = {}
        for i, (w, b) in enumerate(self.convs):
            out[f"conv{i + 1}.weight"] = w
            out[f"conv{i + 1}.bias"] = b
        out["fc.weight"], out["fc.bias"] = self.fc_w, self.fc_b
        return out

    def forward(self, images, training=False, rng=None, return_layers=False):
        x = T.as_tensor(images)
        for (w, b), s in zip(self.convs, self.config.strides):
            x = T.relu(conv2d(x, w, b, stride=s, pad=self.config.kernel // 2))
        feats = T.mean(x.reshape(x.shape[0], x.shape[1], -1), axis=2)
        logits = feats @ self.fc_w + self.fc_b
        return ForwardOutput(logits, None, feats)

    __call__ = forward

    def logits(self, images):
        with T.no_grad():
            return self.forward(images).class_logits.data


def build_teacher_model(kind, num_classes, image_size=32, seed=0):
    if kind == "convnet":
        return TinyConvNet(ConvNetConfig(num_classes=num_classes, image_size=image_size), seed=seed)
    if kind == "transformer":
        cfg = preset("deit-micro", num_classes=num_classes, image_size=image_size,
                     use_distill_token=False)
        return DeiTModel(cfg, seed=seed)
    raise ParameterError(f"unknown teacher kind {kind!r}; choose from {TEACHER_KINDS}")


def train_teacher(kind, dataset, run_config, eval_dataset=None, out_dir=None, log=None):
    """Train a teacher with the student's augmentation pipeline; returns a frozen Teacher.

    With ``out_dir`` the final checkpoint is written with ``role: teacher``.
    """
    from .train import train
    model = build_teacher_model(kind, dataset.num_classes, dataset.resolution,
                                seed=run_config.seed)
    cfg = run_config.with_distill_mode("none")
    train(model, dataset, cfg, eval_dataset=eval_dataset, out_dir=out_dir, log=log,
          role="teacher", teacher_kind=kind)
    return Teacher(model, dataset.resolution, name=f"{kind}-teacher")
