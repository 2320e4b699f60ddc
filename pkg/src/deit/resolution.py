"""Changing input resolution: positional-embedding resampling and fine-tuning."""
import math
from dataclasses import replace

import numpy as np

from .errors import ContractError, ParameterError

CATMULL_ROM_A = -0.5


def cubic_weights(t, a=CATMULL_ROM_A):
    """Keys cubic convolution weights for taps at offsets -1, 0, 1, 2 from floor(x)."""
    def k(x):
        x = abs(x)
        if x <= 1:
            return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
        if x < 2:
            return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
        return 0.0
    return np.array([k(t + 1), k(t), k(1 - t), k(2 - t)])


def resample_matrix(n_in, n_out, kernel="bicubic"):
    """n_out x n_in matrix mapping samples on a grid of n_in cells to n_out cells.

    Cell centres are aligned (half-pixel convention) and out-of-range taps are
    clamped to the edge.
    """
    W = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        base = math.floor(src)
        t = src - base
        if kernel == "bicubic":
            taps, w = range(base - 1, base + 3), cubic_weights(t)
        elif kernel == "bilinear":
            taps, w = (base, base + 1), (1.0 - t, t)
        else:
            raise ParameterError(f"unknown kernel {kernel!r}")
        for j, wj in zip(taps, w):
            W[i, min(max(j, 0), n_in - 1)] += wj
    return W


def resize_grid(grid, new_side, kernel="bicubic"):
    """Resample a g x g x D grid (each channel an image) to new_side x new_side x D."""
    g = grid.shape[0]
    R = resample_matrix(g, new_side, kernel)
    out = np.einsum("ij,jkd->ikd", R, grid.astype(np.float64))
    out = np.einsum("lk,ikd->ild", R, out)
    return out


def interpolate_pos_embed(pos, new_side, kernel="bicubic"):
    """Resample row-major g^2 x D patch position embeddings to new_side^2 x D."""
    pos = np.asarray(pos)
    n, D = pos.shape
    g = int(round(math.sqrt(n)))
    if g * g != n:
        raise ParameterError(f"{n} positional embeddings do not form a square grid")
    if g < 2:
        raise ParameterError("bicubic resampling needs a grid side of at least 2")
    if new_side < 1:
        raise ParameterError("new grid side must be >= 1")
    if new_side == g:
        return pos.copy()
    out = resize_grid(pos.reshape(g, g, D), new_side, kernel)
    return out.reshape(new_side * new_side, D).astype(pos.dtype)


def norm_ratio(pos, new_side, kernel="bicubic"):
    """Per-vector l2 norms after resampling, divided by the mean input norm."""
    out = interpolate_pos_embed(pos, new_side, kernel)
    return np.linalg.norm(out, axis=1) / np.linalg.norm(pos, axis=1).mean()


def change_resolution(model, new_resolution, kernel="bicubic"):
    """Copy of ``model`` accepting ``new_resolution`` inputs; only positions change."""
    p = model.config.patch_size
    if new_resolution % p:
        raise ParameterError(f"resolution {new_resolution} is not divisible by patch size {p}")
    new = model.with_config(image_size=int(new_resolution))
    new.pos_embed.data = interpolate_pos_embed(model.pos_embed.data, new_resolution // p, kernel)
    return new


FINETUNE_LR_DIVISOR = 10


def finetune_config(run_config, epochs=None, lr_divisor=FINETUNE_LR_DIVISOR):
    """Pre-training config adapted for fine-tuning: base lr divided by ``lr_divisor``."""
    optim = replace(run_config.optim, base_lr=run_config.optim.base_lr / lr_divisor)
    if epochs is not None:
        optim = replace(optim, total_epochs=epochs, warmup_epochs=min(optim.warmup_epochs, epochs))
    return replace(run_config, optim=optim)


def finetune(model, new_resolution, train_config=None, dataset=None, teacher=None,
             eval_dataset=None, out_dir=None, log=None):
    """Move ``model`` to ``new_resolution`` and, given data, keep training there.

    The returned model has interpolated position embeddings and otherwise the
    same parameters; with ``dataset`` it is trained with the same augmentation
    and loss family (see :mod:`deit.train`).
    """
    if teacher is not None and teacher.resolution != new_resolution:
        teacher = teacher.at_resolution(new_resolution)
    new = change_resolution(model, new_resolution)
    if dataset is None or train_config is None:
        return new
    if teacher is not None and teacher.resolution != new_resolution:
        raise ContractError("teacher does not accept the fine-tuning resolution")
    from .train import train
    if dataset.resolution != new_resolution:
        dataset = dataset.resized(new_resolution)
    if eval_dataset is not None and eval_dataset.resolution != new_resolution:
        eval_dataset = eval_dataset.resized(new_resolution)
    train(new, dataset, train_config, teacher=teacher, eval_dataset=eval_dataset,
          out_dir=out_dir, log=log)
    return new
