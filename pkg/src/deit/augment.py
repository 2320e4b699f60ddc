"""Data pipeline: repeated-augmentation sampling, Rand-Augment (reduced),
random erasing, Mixup/CutMix and channel normalisation.

Images are float arrays laid out C x H x W (or B x C x H x W for batches).
Every random draw comes from an explicit ``numpy.random.Generator``; per-sample
generators are keyed on (seed, epoch, dataset index, repetition slot) so
results do not depend on worker count or processing order.
"""
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .distill import smooth_labels
from .errors import ParameterError


@dataclass
class AugPolicy:
    mixup_prob: float = 0.8
    mixup_alpha: float = 0.8
    cutmix_prob: float = 1.0
    cutmix_alpha: float = 1.0
    erasing_prob: float = 0.25
    randaug_magnitude: float = 9.0
    randaug_layers: int = 2
    randaug_prob: float = 0.5
    repeated_aug_m: int = 3
    horizontal_flip_prob: float = 0.5

    def __post_init__(self):
        for name in ("mixup_prob", "cutmix_prob", "erasing_prob", "randaug_prob",
                     "horizontal_flip_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must be in [0, 1], got {v}")
        if not 0.0 <= self.randaug_magnitude <= 10.0:
            raise ParameterError("randaug_magnitude must be in [0, 10]")
        if self.repeated_aug_m < 1:
            raise ParameterError("repeated_aug_m must be >= 1")

    @classmethod
    def off(cls, **overrides):
        """No augmentation at all (evaluation / teacher-cache runs)."""
        base = dict(mixup_prob=0.0, cutmix_prob=0.0, erasing_prob=0.0, randaug_layers=0,
                    randaug_magnitude=0.0, repeated_aug_m=1, horizontal_flip_prob=0.0)
        return cls(**{**base, **overrides})

    @property
    def is_identity(self):
        return (self.mixup_prob == 0 and self.cutmix_prob == 0 and self.erasing_prob == 0
                and (self.randaug_layers == 0 or self.randaug_magnitude == 0)
                and self.horizontal_flip_prob == 0)


@dataclass
class Batch:
    images: np.ndarray
    targets: np.ndarray
    labels: np.ndarray
    indices: np.ndarray
    slots: np.ndarray = field(default=None)
    mix: str = "none"
    lam: float = 1.0


def sample_rng(seed, epoch, index, slot):
    return np.random.default_rng([int(seed), int(epoch), int(index), int(slot)])


def batch_rng(seed, epoch, batch_no):
    # a 4-word key with a sentinel keeps batch streams apart from per-sample streams
    return np.random.default_rng([int(seed), int(epoch), int(batch_no), 2**32 - 1, 0])


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def repeated_aug_sampler(dataset_size, batch_size, m, rng):
    """One epoch of index batches; each batch holds batch_size/m distinct indices x m.

    Emits floor(dataset_size / batch_size) batches from one shuffled permutation.
    """
    if m < 1:
        raise ParameterError(f"repetition count must be >= 1, got {m}")
    if batch_size < 1 or batch_size % m:
        raise ParameterError(f"batch_size {batch_size} is not divisible by repetitions {m}")
    if batch_size > dataset_size:
        raise ParameterError(f"batch_size {batch_size} exceeds dataset size {dataset_size}")
    per_batch = batch_size // m
    perm = rng.permutation(dataset_size)
    for b in range(dataset_size // batch_size):
        distinct = perm[b * per_batch:(b + 1) * per_batch]
        yield np.repeat(distinct, m)


def steps_per_epoch(dataset_size, batch_size):
    return dataset_size // batch_size


# --------------------------------------------------------------------------
# batch-level mixing
# --------------------------------------------------------------------------

def mixup(batch, alpha, rng, lam=None, perm=None):
    """x = lam x_i + (1-lam) x_j and the same for targets, lam ~ Beta(alpha, alpha)."""
    B = batch.images.shape[0]
    if B < 2:
        raise ParameterError("mixup needs a batch of at least 2 samples")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    if perm is None:
        perm = rng.permutation(B)
    dt = batch.images.dtype.type
    images = dt(lam) * batch.images + dt(1.0 - lam) * batch.images[perm]
    targets = lam * batch.targets + (1.0 - lam) * batch.targets[perm]
    return replace(batch, images=images.astype(batch.images.dtype),
                   targets=targets.astype(batch.targets.dtype), mix="mixup", lam=lam)


def cutmix_box(size, lam, rng):
    """Box (y0, y1, x0, x1) of nominal area (1-lam)*size^2, clipped to the image."""
    cut = math.sqrt(1.0 - lam)
    ch = cw = int(size * cut)
    cy, cx = int(rng.integers(size)), int(rng.integers(size))
    y0, y1 = np.clip([cy - ch // 2, cy + ch - ch // 2], 0, size)
    x0, x1 = np.clip([cx - cw // 2, cx + cw - cw // 2], 0, size)
    return int(y0), int(y1), int(x0), int(x1)


def cutmix(batch, alpha, rng, lam=None, box=None, perm=None):
    """Paste a partner's box into each sample; targets mix by the realised box area."""
    B, _, H, W = batch.images.shape
    if B < 2:
        raise ParameterError("cutmix needs a batch of at least 2 samples")
    if box is None:
        if lam is None:
            lam = float(rng.beta(alpha, alpha))
        box = cutmix_box(H, lam, rng)
    if perm is None:
        perm = rng.permutation(B)
    y0, y1, x0, x1 = box
    images = batch.images.copy()
    images[:, :, y0:y1, x0:x1] = batch.images[perm][:, :, y0:y1, x0:x1]
    lam_hat = 1.0 - (y1 - y0) * (x1 - x0) / float(H * W)
    targets = lam_hat * batch.targets + (1.0 - lam_hat) * batch.targets[perm]
    return replace(batch, images=images, targets=targets.astype(batch.targets.dtype),
                   mix="cutmix", lam=lam_hat)


def mix_batch(batch, policy, rng):
    """Draw Mixup and CutMix independently; when both fire pick one uniformly."""
    do_mixup = rng.random() < policy.mixup_prob
    do_cutmix = rng.random() < policy.cutmix_prob
    if do_mixup and do_cutmix:
        do_mixup = rng.random() < 0.5
        do_cutmix = not do_mixup
    if do_mixup:
        return mixup(batch, policy.mixup_alpha, rng)
    if do_cutmix:
        return cutmix(batch, policy.cutmix_alpha, rng)
    return batch


# --------------------------------------------------------------------------
# per-image transforms
# --------------------------------------------------------------------------

def erase_box(h, w, rng, area=(0.02, 1.0 / 3.0), aspect=(0.3, 3.3), attempts=10):
    for _ in range(attempts):
        target = rng.uniform(*area) * h * w
        ratio = math.exp(rng.uniform(math.log(aspect[0]), math.log(aspect[1])))
        eh = int(round(math.sqrt(target * ratio)))
        ew = int(round(math.sqrt(target / ratio)))
        if 0 < eh <= h and 0 < ew <= w:
            y = int(rng.integers(0, h - eh + 1))
            x = int(rng.integers(0, w - ew + 1))
            return y, y + eh, x, x + ew
    # fall back to a clamped rectangle so an erase always happens once chosen
    eh, ew = max(1, min(h, eh)), max(1, min(w, ew))
    y = int(rng.integers(0, h - eh + 1))
    x = int(rng.integers(0, w - ew + 1))
    return y, y + eh, x, x + ew


def random_erasing(image, prob, rng, return_box=False):
    """With probability ``prob`` replace one rectangle by N(0, 1) noise."""
    if not 0.0 <= prob <= 1.0:
        raise ParameterError(f"erasing probability must be in [0, 1], got {prob}")
    box = None
    out = image
    if prob > 0 and rng.random() < prob:
        C, H, W = image.shape
        y0, y1, x0, x1 = box = erase_box(H, W, rng)
        out = image.copy()
        out[:, y0:y1, x0:x1] = rng.standard_normal((C, y1 - y0, x1 - x0))
    return (out, box) if return_box else out


def _translate(img, dy, dx):
    out = np.zeros_like(img)
    H, W = img.shape[1:]
    ys, yd = (slice(0, H - dy), slice(dy, H)) if dy >= 0 else (slice(-dy, H), slice(0, H + dy))
    xs, xd = (slice(0, W - dx), slice(dx, W)) if dx >= 0 else (slice(-dx, W), slice(0, W + dx))
    out[:, yd, xd] = img[:, ys, xs]
    return out


def rotate(img, degrees):
    """Bilinear rotation about the image centre, zero fill outside."""
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    H, W = img.shape[1:]
    center = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
    mat = np.array([[c, -s], [s, c]])
    offset = center - mat @ center
    return np.stack([ndimage.affine_transform(ch, mat, offset=offset, order=1, mode="constant",
                                              cval=0.0) for ch in img]).astype(img.dtype)


def _op_identity(img, s, sign):
    return img


def _op_flip(img, s, sign):
    return img[:, :, ::-1].copy() if s > 0 else img


def _op_translate_x(img, s, sign):
    return _translate(img, 0, int(round(sign * s * 0.45 * img.shape[2])))


def _op_translate_y(img, s, sign):
    return _translate(img, int(round(sign * s * 0.45 * img.shape[1])), 0)


def _op_rotate(img, s, sign):
    return rotate(img, sign * s * 30.0)


def _op_brightness(img, s, sign):
    return np.clip(img * img.dtype.type(1.0 + sign * 0.9 * s), 0.0, 1.0)


def _op_contrast(img, s, sign):
    gray = img.mean()
    return np.clip(gray + (img - gray) * img.dtype.type(1.0 + sign * 0.9 * s), 0.0, 1.0)


def _op_solarize(img, s, sign):
    thr = 1.0 - s
    return np.where(img > thr, 1.0 - img, img).astype(img.dtype)


def _op_posterize(img, s, sign):
    bits = 8 - int(round(s * 4))
    if bits >= 8:
        return img
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    shift = 8 - bits
    return (((q >> shift) << shift) / 255.0).astype(img.dtype)


RANDAUG_OPS = {
    "identity": _op_identity,
    "hflip": _op_flip,
    "translate_x": _op_translate_x,
    "translate_y": _op_translate_y,
    "rotate": _op_rotate,
    "brightness": _op_brightness,
    "contrast": _op_contrast,
    "solarize": _op_solarize,
    "posterize": _op_posterize,
}
_OP_NAMES = tuple(RANDAUG_OPS)


def rand_augment_lite(image, magnitude, layers, rng, prob=0.5):
    """Apply ``layers`` ops drawn uniformly from the reduced set, each with
    probability ``prob``, at strength magnitude/10.  Magnitude 0 is the identity
    for every op (the flip included)."""
    if not 0.0 <= magnitude <= 10.0:
        raise ParameterError(f"magnitude must be in [0, 10], got {magnitude}")
    s = magnitude / 10.0
    out = image
    for _ in range(layers):
        name = _OP_NAMES[int(rng.integers(len(_OP_NAMES)))]
        apply = rng.random() < prob
        sign = 1.0 if rng.random() < 0.5 else -1.0
        if apply:
            out = RANDAUG_OPS[name](out, s, sign)
    return out


def normalize(images, mean, std):
    mean = np.asarray(mean, dtype=images.dtype).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=images.dtype).reshape(-1, 1, 1)
    return (images - mean) / std


def denormalize(images, mean, std):
    mean = np.asarray(mean, dtype=images.dtype).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=images.dtype).reshape(-1, 1, 1)
    return images * std + mean


# --------------------------------------------------------------------------
# full pipeline
# --------------------------------------------------------------------------

class Pipeline:
    """Turns index batches into augmented, normalised :class:`Batch` objects."""

    def __init__(self, dataset, policy, seed, label_smoothing=0.1, smoothing_spread="others",
                 dtype=np.float32):
        self.dataset = dataset
        self.policy = policy
        self.seed = int(seed)
        self.eps = label_smoothing
        self.spread = smoothing_spread
        self.dtype = dtype

    def augment_one(self, index, epoch, slot):
        p = self.policy
        rng = sample_rng(self.seed, epoch, index, slot)
        img = self.dataset.image(index).astype(self.dtype)
        if p.randaug_layers and p.randaug_magnitude > 0:
            img = rand_augment_lite(img, p.randaug_magnitude, p.randaug_layers, rng,
                                    p.randaug_prob)
        if p.horizontal_flip_prob and rng.random() < p.horizontal_flip_prob:
            img = img[:, :, ::-1]
        img = normalize(img, self.dataset.mean, self.dataset.std)
        if p.erasing_prob:
            img = random_erasing(img, p.erasing_prob, rng)
        return np.ascontiguousarray(img, dtype=self.dtype)

    def make_batch(self, indices, epoch, batch_no):
        indices = np.asarray(indices)
        m = self.policy.repeated_aug_m
        slots = np.arange(len(indices)) % m
        images = np.stack([self.augment_one(i, epoch, s) for i, s in zip(indices, slots)])
        labels = self.dataset.labels[indices]
        targets = smooth_labels(labels, self.dataset.num_classes, self.eps, self.spread)
        batch = Batch(images, targets.astype(self.dtype), labels, indices, slots)
        if self.policy.mixup_prob or self.policy.cutmix_prob:
            batch = mix_batch(batch, self.policy, batch_rng(self.seed, epoch, batch_no))
        return batch

    def epoch(self, epoch, batch_size):
        rng = np.random.default_rng([self.seed, int(epoch)])
        sampler = repeated_aug_sampler(len(self.dataset), batch_size,
                                       self.policy.repeated_aug_m, rng)
        for b, idx in enumerate(sampler):
            yield self.make_batch(idx, epoch, b)
