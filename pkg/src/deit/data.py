"""Datasets: CIFAR-10 binary records and seeded synthetic generators."""
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import FormatError, ParameterError

CIFAR_RES = 32
CIFAR_CLASSES = 10
RECORD = 1 + 3 * CIFAR_RES * CIFAR_RES
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]


@dataclass
class Dataset:
    """Images N x 3 x r x r (uint8, or float in [0, 1]) plus hard labels."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    mean: np.ndarray = field(default=None)
    std: np.ndarray = field(default=None)
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ParameterError("images and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ParameterError(f"labels must lie in [0, {self.num_classes})")
        if self.mean is None or self.std is None:
            self.mean, self.std = channel_stats(self.images)
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(3)

    def __len__(self):
        return len(self.labels)

    @property
    def resolution(self):
        return self.images.shape[-1]

    def image(self, i):
        """Pixel values in [0, 1] as float32, C x H x W."""
        img = self.images[i]
        if img.dtype == np.uint8:
            return img.astype(np.float32) / np.float32(255.0)
        return img.astype(np.float32, copy=False)

    def normalized(self, idx=None, dtype=np.float32):
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        imgs = self.images[idx]
        imgs = imgs.astype(np.float64) / 255.0 if imgs.dtype == np.uint8 else imgs.astype(np.float64)
        out = (imgs - self.mean.reshape(1, 3, 1, 1)) / self.std.reshape(1, 3, 1, 1)
        return out.astype(dtype)

    def denormalize(self, normed):
        return normed * self.std.reshape(1, 3, 1, 1) + self.mean.reshape(1, 3, 1, 1)

    def subset(self, idx, name=None):
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.mean, self.std,
                       name or self.name)

    def with_stats(self, mean, std):
        return Dataset(self.images, self.labels, self.num_classes, mean, std, self.name)

    def resized(self, resolution):
        """Bilinearly rescaled copy (float pixels), keeping normalisation stats."""
        if resolution == self.resolution:
            return self
        imgs = self.images.astype(np.float32)
        if self.images.dtype == np.uint8:
            imgs /= 255.0
        z = resolution / self.resolution
        out = ndimage.zoom(imgs, (1, 1, z, z), order=1)
        return Dataset(np.clip(out, 0.0, 1.0).astype(np.float32), self.labels, self.num_classes,
                       self.mean, self.std, self.name)


def channel_stats(images):
    x = images.astype(np.float64)
    if images.dtype == np.uint8:
        x /= 255.0
    mean = x.mean(axis=(0, 2, 3)) if len(x) else np.zeros(3)
    std = x.std(axis=(0, 2, 3)) if len(x) else np.ones(3)
    return mean, np.where(std > 0, std, 1.0)


def _read_records(path, chunk_records=1024):
    """Yield (labels, pixels) chunks from one binary file without loading it whole."""
    size = os.path.getsize(path)
    if size % RECORD:
        whole = size // RECORD
        raise FormatError(f"{path}: truncated record at byte offset {whole * RECORD} "
                          f"(file size {size} is not a multiple of {RECORD})")
    offset = 0
    with open(path, "rb") as f:
        while True:
            buf = f.read(RECORD * chunk_records)
            if not buf:
                break
            if len(buf) % RECORD:
                raise FormatError(f"{path}: truncated record at byte offset "
                                  f"{offset + (len(buf) // RECORD) * RECORD}")
            arr = np.frombuffer(buf, dtype=np.uint8).reshape(-1, RECORD)
            labels = arr[:, 0].astype(np.int64)
            bad = np.nonzero(labels >= CIFAR_CLASSES)[0]
            if bad.size:
                at = offset + int(bad[0]) * RECORD
                raise FormatError(f"{path}: label {labels[bad[0]]} >= {CIFAR_CLASSES} "
                                  f"at byte offset {at}")
            yield labels, arr[:, 1:].reshape(-1, 3, CIFAR_RES, CIFAR_RES)
            offset += len(buf)


def load_cifar10(path, split="train", stats=None, limit=None):
    """Load CIFAR-10 binary records from a file or from the standard directory layout.

    Normalisation stats default to those of the loaded images; pass the train
    split's ``(mean, std)`` when loading the test split.
    """
    if os.path.isdir(path):
        names = TRAIN_FILES if split == "train" else TEST_FILES
        files = [os.path.join(path, n) for n in names if os.path.exists(os.path.join(path, n))]
        if not files:
            raise FormatError(f"no CIFAR-10 {split} files under {path}")
    else:
        files = [path]
    labels, images, count = [], [], 0
    for fp in files:
        for lab, pix in _read_records(fp):
            if limit is not None:
                take = max(0, limit - count)
                lab, pix = lab[:take], pix[:take]
            labels.append(lab)
            images.append(pix.copy())
            count += len(lab)
            if limit is not None and count >= limit:
                break
        if limit is not None and count >= limit:
            break
    images = np.concatenate(images) if images else np.zeros((0, 3, 32, 32), np.uint8)
    labels = np.concatenate(labels) if labels else np.zeros(0, np.int64)
    mean, std = stats if stats is not None else channel_stats(images)
    return Dataset(images, labels, CIFAR_CLASSES, mean, std, name=f"cifar10:{split}")


def export_cifar10(dataset, path):
    """Write a dataset in the CIFAR-10 record layout (resolution 32, < 256 classes)."""
    if dataset.resolution != CIFAR_RES:
        raise ParameterError("CIFAR-10 records are 32x32")
    imgs = dataset.images
    if imgs.dtype != np.uint8:
        imgs = np.clip(np.round(imgs * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        for lab, img in zip(dataset.labels, imgs):
            f.write(bytes([int(lab)]))
            f.write(np.ascontiguousarray(img).tobytes())


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

SYNTH_KINDS = ("gaussian-blobs", "striped-patterns")
_KIND_ALIASES = {"blobs": "gaussian-blobs", "stripes": "striped-patterns"}


def _blob_means(C, resolution, sigma, rng):
    """Smooth per-class mean images with pairwise distance >= 6 sigma."""
    for _ in range(100):
        coarse = rng.uniform(0.15, 0.85, size=(C, 3, 4, 4))
        z = resolution / 4.0
        means = np.clip(ndimage.zoom(coarse, (1, 1, z, z), order=1), 0.0, 1.0)
        flat = means.reshape(C, -1)
        d = np.sqrt(((flat[:, None] - flat[None]) ** 2).sum(-1))
        if C < 2 or d[np.triu_indices(C, 1)].min() >= 6 * sigma:
            return means
    raise ParameterError("could not place class means 6 sigma apart")


def synth_dataset(kind, n, num_classes, resolution=32, seed=0, split=0, noise=None):
    """Deterministic synthetic images.

    ``gaussian-blobs``: per-class smooth mean image plus isotropic Gaussian noise.
    ``striped-patterns``: per-class stripe frequency at random orientation,
    phase and tint.
    Class layout depends only on ``seed``; ``split`` picks an independent draw of
    samples from the same classes.
    """
    kind = _KIND_ALIASES.get(kind, kind)
    if kind not in SYNTH_KINDS:
        raise ParameterError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    if n < num_classes:
        raise ParameterError(f"need n >= num_classes, got n={n}, C={num_classes}")
    class_rng = np.random.default_rng([int(seed), 0])
    rng = np.random.default_rng([int(seed), 1, int(split)])
    labels = rng.permutation(np.arange(n) % num_classes)
    r = resolution
    if kind == "gaussian-blobs":
        sigma = 0.15 if noise is None else noise
        means = _blob_means(num_classes, r, sigma, class_rng)
        images = means[labels] + sigma * rng.standard_normal((n, 3, r, r))
    else:
        sigma = 0.1 if noise is None else noise
        # class = stripe frequency; orientation, phase and tint are nuisances, so
        # flips, rotations and translations keep the class
        freq = np.linspace(1.5, 7.0, num_classes) + class_rng.uniform(-0.05, 0.05, num_classes)
        yy, xx = np.mgrid[0:r, 0:r] / r
        th = rng.uniform(0, np.pi, size=(n, 1, 1))
        phase = rng.uniform(0, 2 * np.pi, size=(n, 1, 1))
        wave = np.sin(2 * np.pi * freq[labels][:, None, None]
                      * (xx * np.cos(th) + yy * np.sin(th)) + phase)
        tint = rng.uniform(0.3, 1.0, size=(n, 3, 1, 1))
        images = 0.5 + 0.4 * tint * wave[:, None] + sigma * rng.standard_normal((n, 3, r, r))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels, num_classes, name=f"synth:{kind}")
