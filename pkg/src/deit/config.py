"""Run configuration: nested dataclasses exposed as flat dotted JSON keys."""
import difflib
import json
from dataclasses import dataclass, field, fields, replace

from .augment import AugPolicy
from .distill import DistillConfig
from .errors import ParameterError
from .model import DeiTConfig, preset
from .optim import OptimConfig


@dataclass
class RunSettings:
    seed: int = 0
    dataset: str = ""
    eval_dataset: str = ""
    out_dir: str = "runs/default"
    eval_batch_size: int = 256
    teacher: str = ""
    teacher_cache: bool = False
    checkpoint_every: int = 1


@dataclass
class RunConfig:
    """Defaults follow the DeiT-B training column (300 epochs, batch 1024)."""

    preset: str = "deit-base"
    model: dict = field(default_factory=dict)
    distill: DistillConfig = field(default_factory=DistillConfig)
    aug: AugPolicy = field(default_factory=AugPolicy)
    optim: OptimConfig = field(default_factory=OptimConfig)
    run: RunSettings = field(default_factory=RunSettings)

    @property
    def seed(self):
        return self.run.seed

    @property
    def epochs(self):
        return self.optim.total_epochs

    @property
    def batch_size(self):
        return self.optim.batch_size

    def model_config(self, num_classes=None, **extra):
        overrides = dict(self.model)
        if num_classes is not None:
            overrides.setdefault("num_classes", num_classes)
        overrides.update(extra)
        return preset(self.preset, **overrides)

    def with_distill_mode(self, mode):
        return replace(self, distill=replace(self.distill, mode=mode))

    # -- flat dotted form --------------------------------------------------
    def to_flat(self):
        out = {"model.preset": self.preset}
        out.update({f"model.{k}": v for k, v in self.model.items()})
        for section in ("distill", "aug", "optim", "run"):
            obj = getattr(self, section)
            out.update({f"{section}.{f.name}": getattr(obj, f.name) for f in fields(obj)})
        return out

    @classmethod
    def from_flat(cls, flat, base=None):
        base = base or cls()
        valid = valid_keys()
        sections = {s: {} for s in ("distill", "aug", "optim", "run")}
        model = dict(base.model)
        name = base.preset
        for key, value in flat.items():
            if key not in valid:
                near = difflib.get_close_matches(key, sorted(valid), n=1)
                hint = f"; did you mean {near[0]!r}?" if near else ""
                raise ParameterError(f"unknown config key {key!r}{hint}")
            section, attr = key.split(".", 1)
            if key == "model.preset":
                name = value
            elif section == "model":
                model[attr] = value
            else:
                sections[section][attr] = value
        return cls(preset=name, model=model,
                   distill=replace(base.distill, **sections["distill"]),
                   aug=replace(base.aug, **sections["aug"]),
                   optim=replace(base.optim, **sections["optim"]),
                   run=replace(base.run, **sections["run"]))

    @classmethod
    def load(cls, path, base=None):
        with open(path) as f:
            return cls.from_flat(json.load(f), base)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_flat(), f, indent=2, sort_keys=True)


def valid_keys():
    keys = {"model.preset"} | {f"model.{f.name}" for f in fields(DeiTConfig)}
    for section, cls in (("distill", DistillConfig), ("aug", AugPolicy), ("optim", OptimConfig),
                         ("run", RunSettings)):
        keys |= {f"{section}.{f.name}" for f in fields(cls)}
    return keys


def desk_config(**flat):
    """Small-scale starting point: DeiT-micro, short schedule, batch 48."""
    base = {"model.preset": "deit-micro", "optim.total_epochs": 10, "optim.batch_size": 48,
            "optim.warmup_epochs": 1, "optim.base_lr": 5e-4}
    return RunConfig.from_flat({**base, **flat})
