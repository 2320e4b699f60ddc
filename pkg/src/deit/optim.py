"""AdamW / SGD, learning-rate scaling and warmup-cosine schedule, parameter EMA."""
import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParameterError, ShapeError

LR_REFERENCE_BATCH = 512
EMA_DEFAULT_DECAY = 0.99996  # horizon of roughly 25k steps

_NO_DECAY = re.compile(r"(^|\.)(bias|cls_token|dist_token|pos_embed)$|(^|\.)norm\d*\.")


@dataclass
class OptimConfig:
    base_lr: float = 5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_epochs: float = 5.0
    total_epochs: float = 300.0
    batch_size: int = 1024
    min_lr: float = 1e-5
    grad_clip: float | None = None
    ema_decay: float | None = None
    optimizer: str = "adamw"
    momentum: float = 0.9

    def __post_init__(self):
        if self.warmup_epochs > self.total_epochs:
            raise ParameterError("warmup_epochs must not exceed total_epochs")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.ema_decay is not None and not 0.0 <= self.ema_decay <= 1.0:
            raise ParameterError("ema_decay must be in [0, 1]")
        if self.optimizer not in ("adamw", "sgd"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")


def scaled_lr(base_lr, batch_size):
    """Linear scaling rule with 512 as the reference batch size."""
    return base_lr * batch_size / LR_REFERENCE_BATCH


def lr_at(step, steps_per_epoch, config):
    """Linear warmup from 0 to the scaled peak, then cosine decay to ``min_lr``."""
    total = int(round(config.total_epochs * steps_per_epoch))
    if not 0 <= step < total:
        raise ContractError(f"step {step} outside schedule [0, {total})")
    peak = scaled_lr(config.base_lr, config.batch_size)
    warm = int(round(config.warmup_epochs * steps_per_epoch))
    if step < warm:
        return peak * step / warm
    span = total - 1 - warm
    u = 1.0 if span <= 0 else (step - warm) / span
    floor = min(config.min_lr, peak)
    return floor + (peak - floor) * (1.0 + math.cos(math.pi * u)) / 2.0


def decays(name):
    """Whether weight decay applies to the parameter called ``name``."""
    return _NO_DECAY.search(name) is None


def _check_grads(named):
    for name, p in named.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")


def clip_grad_norm(params, max_norm):
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                          for p in params if p.grad is not None))
    if total > max_norm:
        c = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(c)
    return total


class AdamW:
    """Decoupled weight decay: theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)."""

    def __init__(self, named_params, config):
        self.params = dict(named_params)
        self.config = config
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr):
        cfg = self.config
        _check_grads(self.params)
        if cfg.grad_clip is not None:
            clip_grad_norm(self.params.values(), cfg.grad_clip)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            if cfg.weight_decay and decays(name):
                update = update + cfg.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        out = {"step": np.array([self.step_count], dtype=np.int64)}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state(self, state):
        self.step_count = int(state["step"][0])
        for k in self.params:
            if state[f"m.{k}"].shape != self.m[k].shape:
                raise ShapeError(f"optimizer moment for {k!r} has the wrong shape")
            self.m[k] = state[f"m.{k}"].copy()
            self.v[k] = state[f"v.{k}"].copy()


class SGD:
    """SGD with momentum and coupled (L2) weight decay, used for fine-tuning."""

    def __init__(self, named_params, config):
        self.params = dict(named_params)
        self.config = config
        self.step_count = 0
        self.buf = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr):
        cfg = self.config
        _check_grads(self.params)
        if cfg.grad_clip is not None:
            clip_grad_norm(self.params.values(), cfg.grad_clip)
        self.step_count += 1
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if cfg.weight_decay and decays(name):
                g = g + cfg.weight_decay * p.data
            b = self.buf[name]
            b *= cfg.momentum
            b += g
            p.data = (p.data - lr * b).astype(p.data.dtype, copy=False)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self):
        out = {"step": np.array([self.step_count], dtype=np.int64)}
        out.update({f"buf.{k}": v for k, v in self.buf.items()})
        return out

    def load_state(self, state):
        self.step_count = int(state["step"][0])
        for k in self.params:
            self.buf[k] = state[f"buf.{k}"].copy()


def make_optimizer(named_params, config):
    return (AdamW if config.optimizer == "adamw" else SGD)(named_params, config)


def adamw_step(params, grads, state, lr, config):
    """Functional single AdamW step over dicts of arrays; returns (params, state)."""
    m, v, t = state.get("m", {}), state.get("v", {}), state.get("step", 0) + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        mk = config.beta1 * m.get(name, np.zeros_like(theta)) + (1 - config.beta1) * g
        vk = config.beta2 * v.get(name, np.zeros_like(theta)) + (1 - config.beta2) * g * g
        update = (mk / (1 - config.beta1 ** t)) / (np.sqrt(vk / (1 - config.beta2 ** t)) + config.eps)
        if config.weight_decay and decays(name):
            update = update + config.weight_decay * theta
        new_params[name] = theta - lr * update
        new_m[name], new_v[name] = mk, vk
    return new_params, {"m": new_m, "v": new_v, "step": t}


class EMA:
    """Exponential moving average of parameter arrays: ema = d * ema + (1 - d) * param."""

    def __init__(self, named_params, decay):
        if not 0.0 <= decay <= 1.0:
            raise ParameterError("EMA decay must be in [0, 1]")
        self.decay = decay
        self.shadow = {k: p.data.copy() for k, p in named_params.items()}

    def update(self, named_params):
        for k, p in named_params.items():
            ema_update_inplace(self.shadow[k], p.data, self.decay)

    def state(self):
        return dict(self.shadow)


def ema_update_inplace(ema, param, decay):
    if ema.shape != param.shape:
        raise ShapeError(f"EMA shape {ema.shape} does not match parameter {param.shape}")
    ema *= ema.dtype.type(decay)
    ema += ema.dtype.type(1.0 - decay) * param
    return ema


def ema_update(ema_params, params, decay):
    """Pure form over dicts of arrays."""
    out = {}
    for k, e in ema_params.items():
        if e.shape != params[k].shape:
            raise ShapeError(f"EMA shape {e.shape} does not match parameter {params[k].shape} ({k})")
        out[k] = decay * e + (1.0 - decay) * params[k]
    return out
