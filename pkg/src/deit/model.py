"""Vision transformer with class and distillation tokens."""
import copy
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import tensor as T
from .errors import ParameterError, ShapeError
from .tensor import Tensor

TRUNC_CUTOFF = 2.0


@dataclass
class DeiTConfig:
    embed_dim: int = 64
    num_heads: int = 4
    num_layers: int = 2
    patch_size: int = 4
    image_size: int = 32
    num_classes: int = 10
    drop_path_rate: float = 0.1
    use_distill_token: bool = True
    init_std: float = 0.02
    mlp_ratio: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ParameterError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.image_size % self.patch_size:
            raise ParameterError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ParameterError(f"drop_path_rate must be in [0, 1), got {self.drop_path_rate}")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.init_std <= 0:
            raise ParameterError("init_std must be positive")

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    @property
    def grid_side(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid_side ** 2

    @property
    def seq_len(self):
        return self.num_patches + 1 + int(self.use_distill_token)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


PRESETS = {
    "deit-tiny": dict(embed_dim=192, num_heads=3, num_layers=12, patch_size=16, image_size=224),
    "deit-small": dict(embed_dim=384, num_heads=6, num_layers=12, patch_size=16, image_size=224),
    "deit-base": dict(embed_dim=768, num_heads=12, num_layers=12, patch_size=16, image_size=224),
    "deit-micro": dict(embed_dim=64, num_heads=4, num_layers=2, patch_size=4, image_size=32),
}
_ALIASES = {"deit-ti": "deit-tiny", "deit-s": "deit-small", "deit-b": "deit-base",
            "deit-mu": "deit-micro", "deit-µ": "deit-micro"}


def preset(name, **overrides):
    key = _ALIASES.get(name.lower(), name.lower())
    if key not in PRESETS:
        raise ParameterError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return DeiTConfig(**{**PRESETS[key], **overrides})


def param_count(config):
    """Closed-form number of scalar parameters for ``config``."""
    D, C, p = config.embed_dim, config.num_classes, config.patch_size
    hidden = config.mlp_ratio * D
    n_heads_out = 1 + int(config.use_distill_token)
    patch = 3 * p * p * D + D
    tokens = n_heads_out * D
    pos = config.num_patches * D
    block = (2 * 2 * D              # two layer norms
             + 3 * D * D + 3 * D    # qkv
             + D * D + D            # attention output projection
             + D * hidden + hidden  # fc1
             + hidden * D + D)      # fc2
    final_norm = 2 * D
    heads = n_heads_out * (D * C + C)
    return patch + tokens + pos + config.num_layers * block + final_norm + heads


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

class Linear:
    def __init__(self, d_in, d_out, rng, std):
        self.weight = T.init_truncated_normal((d_in, d_out), std, TRUNC_CUTOFF, rng)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x):
        return x @ self.weight + self.bias

    def named_parameters(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class LayerNorm:
    def __init__(self, d):
        self.weight = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x):
        return T.layer_norm(x, self.weight, self.bias)

    def named_parameters(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


def attention(q, k, v):
    """softmax(q k^T / sqrt(d)) v over the last two axes; leading axes broadcast."""
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise ShapeError(f"attention: Q {q.shape}, K {k.shape}, V {v.shape} do not conform")
    scores = T.scale(q @ T.swapaxes(k, -1, -2), 1.0 / math.sqrt(d))
    return T.softmax(scores) @ v


class MultiHeadAttention:
    def __init__(self, dim, num_heads, rng, std):
        self.num_heads = num_heads
        self.qkv = Linear(dim, 3 * dim, rng, std)
        self.proj = Linear(dim, dim, rng, std)

    def __call__(self, x):
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        B, S, D = x.shape
        h = self.num_heads
        qkv = self.qkv(x).reshape(B, S, 3, h, D // h)
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))
        out = attention(qkv[0], qkv[1], qkv[2])          # B, h, S, d
        out = T.transpose(out, (0, 2, 1, 3)).reshape(B, S, D)
        out = self.proj(out)
        return out.reshape(S, D) if squeeze else out

    def named_parameters(self, prefix):
        return {**self.qkv.named_parameters(f"{prefix}.qkv"),
                **self.proj.named_parameters(f"{prefix}.proj")}


def multi_head_attention(x, mha):
    return mha(x)


class MLP:
    def __init__(self, dim, hidden, rng, std):
        self.fc1 = Linear(dim, hidden, rng, std)
        self.fc2 = Linear(hidden, dim, rng, std)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))

    def named_parameters(self, prefix):
        return {**self.fc1.named_parameters(f"{prefix}.fc1"),
                **self.fc2.named_parameters(f"{prefix}.fc2")}


def _drop_mask(batch, p, rng, dtype):
    keep = rng.random(batch) >= p
    return (keep / (1.0 - p)).astype(dtype).reshape(batch, 1, 1)


def _dropout(x, p, training, rng):
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * Tensor(keep.astype(x.dtype))


class Block:
    def __init__(self, dim, num_heads, mlp_ratio, rng, std):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads, rng, std)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio * dim, rng, std)

    def named_parameters(self, prefix):
        return {**self.norm1.named_parameters(f"{prefix}.norm1"),
                **self.attn.named_parameters(f"{prefix}.attn"),
                **self.norm2.named_parameters(f"{prefix}.norm2"),
                **self.mlp.named_parameters(f"{prefix}.mlp")}


def transformer_block(x, block, drop_path_p=0.0, training=False, rng=None, force_drop=False,
                      dropout=0.0):
    """Pre-norm residual block: x + DropPath(MSA(LN x)), then x + DropPath(FFN(LN x)).

    ``force_drop`` zeroes both residual branches for every sample.
    """
    if not 0.0 <= drop_path_p < 1.0:
        raise ParameterError(f"drop_path_p must be in [0, 1), got {drop_path_p}")
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    B = x.shape[0]
    for norm, branch in ((block.norm1, block.attn), (block.norm2, block.mlp)):
        if force_drop:
            continue
        y = _dropout(branch(norm(x)), dropout, training, rng)
        if training and drop_path_p > 0.0:
            y = y * Tensor(_drop_mask(B, drop_path_p, rng, x.dtype))
        x = x + y
    return x.reshape(x.shape[1:]) if squeeze else x


class ParameterSet:
    """State plumbing for classes that define ``named_parameters()``."""

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise ShapeError(f"state is missing tensors: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"tensor {name!r}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class ForwardOutput:
    class_logits: Tensor
    distill_logits: Tensor | None
    tokens_out: Tensor
    layer_tokens: list | None = None


class DeiTModel(ParameterSet):
    def __init__(self, config, seed=0, rng=None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(seed)
        D, std = config.embed_dim, config.init_std
        p = config.patch_size
        self.patch_embed = Linear(3 * p * p, D, rng, std)
        self.cls_token = T.init_truncated_normal((1, D), std, TRUNC_CUTOFF, rng)
        self.dist_token = (T.init_truncated_normal((1, D), std, TRUNC_CUTOFF, rng)
                           if config.use_distill_token else None)
        self.pos_embed = T.init_truncated_normal((config.num_patches, D), std, TRUNC_CUTOFF, rng)
        self.blocks = [Block(D, config.num_heads, config.mlp_ratio, rng, std)
                       for _ in range(config.num_layers)]
        self.norm = LayerNorm(D)
        self.head = Linear(D, config.num_classes, rng, std)
        self.head_dist = (Linear(D, config.num_classes, rng, std)
                          if config.use_distill_token else None)

    @property
    def resolution(self):
        return self.config.image_size

    def named_parameters(self):
        params = {**self.patch_embed.named_parameters("patch_embed"), "cls_token": self.cls_token}
        if self.dist_token is not None:
            params["dist_token"] = self.dist_token
        params["pos_embed"] = self.pos_embed
        for i, blk in enumerate(self.blocks):
            params.update(blk.named_parameters(f"blocks.{i}"))
        params.update(self.norm.named_parameters("norm"))
        params.update(self.head.named_parameters("head"))
        if self.head_dist is not None:
            params.update(self.head_dist.named_parameters("head_dist"))
        return params

    def with_config(self, **changes):
        """A structural copy with a different config (parameters shared by value)."""
        clone = self.copy()
        clone.config = replace(self.config, **changes)
        return clone

    def patch_embed_images(self, images):
        return patch_embed(images, self.patch_embed, self.config)

    def forward(self, images, training=False, rng=None, return_layers=False):
        cfg = self.config
        if training and rng is None:
            rng = np.random.default_rng()
        x = self.patch_embed_images(images) + self.pos_embed
        B = x.shape[0]
        D = cfg.embed_dim
        ones = Tensor(np.ones((B, 1, 1), dtype=x.dtype))
        lead = [ones * self.cls_token]
        if self.dist_token is not None:
            lead.append(ones * self.dist_token)
        x = T.concat(lead + [x], axis=1)
        layers = [x] if return_layers else None
        for blk in self.blocks:
            x = transformer_block(x, blk, cfg.drop_path_rate, training, rng, dropout=cfg.dropout)
            if return_layers:
                layers.append(x)
        x = self.norm(x)
        class_logits = self.head(x[:, 0])
        distill_logits = self.head_dist(x[:, 1]) if self.head_dist is not None else None
        assert x.shape[1] == cfg.seq_len and x.shape[2] == D
        return ForwardOutput(class_logits, distill_logits, x, layers)

    __call__ = forward

    def logits(self, images):
        """Eval-mode late-fusion-free logits of the class head (Teacher interface)."""
        with T.no_grad():
            return self.forward(images).class_logits.data


def patch_embed(images, proj, config):
    """Split B x 3 x r x r images into row-major p x p patches and project each to D."""
    images = T.as_tensor(images)
    r, p = config.image_size, config.patch_size
    if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (r, r):
        raise ShapeError(f"expected images of shape B x 3 x {r} x {r}, got {images.shape}; "
                         "use the resolution module to change input size")
    B, g = images.shape[0], r // p
    x = images.reshape(B, 3, g, p, g, p)
    x = T.transpose(x, (0, 2, 4, 1, 3, 5)).reshape(B, g * g, 3 * p * p)
    return proj(x)


def forward(model, images, training=False, rng=None):
    return model.forward(images, training=training, rng=rng)
