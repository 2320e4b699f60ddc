from collections import Counter

import numpy as np
import pytest

from deit.augment import (RANDAUG_OPS, AugPolicy, Batch, Pipeline, cutmix, erase_box, mix_batch,
                          mixup, normalize, denormalize, rand_augment_lite, random_erasing,
                          repeated_aug_sampler, rotate)
from deit.data import synth_dataset
from deit.distill import smooth_labels
from deit.errors import ParameterError


def _batch(B=6, C=4, r=8, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, C, B)
    return Batch(rng.random((B, 3, r, r)).astype(np.float32),
                 np.eye(C, dtype=np.float32)[labels], labels, np.arange(B))


# -- repeated augmentation -------------------------------------------------------

def test_sampler_m1_is_plain_shuffle():
    idx = np.concatenate(list(repeated_aug_sampler(12, 4, 1, np.random.default_rng(0))))
    assert sorted(idx.tolist()) == list(range(12))


def test_sampler_tiny_example():
    batches = list(repeated_aug_sampler(9, 9, 3, np.random.default_rng(0)))
    assert len(batches) == 1
    counts = Counter(batches[0].tolist())
    assert len(counts) == 3 and set(counts.values()) == {3}


def test_sampler_counting():
    batches = list(repeated_aug_sampler(3000, 30, 3, np.random.default_rng(1)))
    assert len(batches) == 100
    counts = Counter(np.concatenate(batches).tolist())
    assert len(counts) == 1000 and set(counts.values()) == {3}
    for b in batches:
        c = Counter(b.tolist())
        assert len(c) == 10 and set(c.values()) == {3}


def test_sampler_rejects_indivisible_batch():
    with pytest.raises(ParameterError):
        next(repeated_aug_sampler(100, 10, 3, np.random.default_rng(0)))


# -- mixup -------------------------------------------------------------------

def test_mixup_lambda_one_is_identity():
    b = _batch()
    out = mixup(b, 0.8, np.random.default_rng(0), lam=1.0)
    np.testing.assert_array_equal(out.images, b.images)
    np.testing.assert_array_equal(out.targets, b.targets)


def test_mixup_half():
    b = _batch()
    b.targets = np.eye(4, dtype=np.float32)[[0, 1, 2, 3, 0, 1]]
    perm = np.array([1, 0, 3, 2, 5, 4])
    out = mixup(b, 0.8, np.random.default_rng(0), lam=0.5, perm=perm)
    np.testing.assert_allclose(out.targets[0], [0.5, 0.5, 0, 0])


def test_mixup_pixels():
    b = _batch()
    rng = np.random.default_rng(3)
    perm = rng.permutation(6)
    out = mixup(b, 0.8, rng, lam=0.3, perm=perm)
    for _ in range(20):
        i, c, y, x = rng.integers(6), rng.integers(3), rng.integers(8), rng.integers(8)
        ref = 0.3 * b.images[i, c, y, x] + 0.7 * b.images[perm[i], c, y, x]
        assert abs(out.images[i, c, y, x] - ref) <= 1e-6


# -- cutmix ------------------------------------------------------------------

def test_cutmix_empty_box():
    b = _batch()
    out = cutmix(b, 1.0, np.random.default_rng(0), box=(2, 2, 0, 8))
    np.testing.assert_array_equal(out.images, b.images)
    np.testing.assert_array_equal(out.targets, b.targets)


def test_cutmix_full_box_swaps():
    b = _batch()
    perm = np.roll(np.arange(6), 1)
    out = cutmix(b, 1.0, np.random.default_rng(0), box=(0, 8, 0, 8), perm=perm)
    np.testing.assert_array_equal(out.images, b.images[perm])
    np.testing.assert_array_equal(out.targets, b.targets[perm])


def test_cutmix_quarter_box():
    b = _batch()
    perm = np.roll(np.arange(6), 1)
    out = cutmix(b, 1.0, np.random.default_rng(0), box=(0, 4, 4, 8), perm=perm)
    np.testing.assert_allclose(out.targets, 0.75 * b.targets + 0.25 * b.targets[perm], atol=1e-7)


def test_cutmix_label_fraction_equals_realised_area():
    rng = np.random.default_rng(4)
    B = 6
    perm = np.roll(np.arange(B), 1)  # no fixed points, so every pasted pixel is visible
    plain = np.broadcast_to(np.arange(1, B + 1, dtype=np.float32)[:, None, None, None],
                            (B, 3, 8, 8)).copy()
    for _ in range(500):
        b = _batch(B=B, seed=int(rng.integers(1 << 30)))
        b.images = plain
        out = cutmix(b, 1.0, rng, perm=perm)
        pasted = out.images[:, 0] != plain[:, 0]
        area = pasted.sum(axis=(1, 2)) / 64.0
        assert np.all(area == area[0])
        np.testing.assert_array_equal(out.images[pasted[:, None].repeat(3, 1)],
                                      plain[perm][pasted[:, None].repeat(3, 1)])
        assert out.lam == 1.0 - area[0]
        np.testing.assert_allclose(out.targets,
                                   (1 - area[0]) * b.targets + area[0] * b.targets[perm],
                                   atol=1e-7)


def test_mix_composition_keeps_rows_normalised():
    rng = np.random.default_rng(6)
    labels = rng.integers(0, 10, 8)
    b = Batch(rng.random((8, 3, 8, 8)).astype(np.float32),
              smooth_labels(labels, 10, 0.1), labels, np.arange(8))
    for _ in range(50):
        b = mixup(b, 0.8, rng) if rng.random() < 0.5 else cutmix(b, 1.0, rng)
        assert np.abs(b.targets.sum(1) - 1).max() <= 1e-5


def test_smoothing_commutes_with_mixing():
    rng = np.random.default_rng(7)
    labels = rng.integers(0, 5, 6)
    hard = np.eye(5)[labels]
    perm = rng.permutation(6)
    lam, eps = 0.37, 0.1
    mixed_then_smoothed = (1 - eps) * (lam * hard + (1 - lam) * hard[perm]) + eps / 4 * (
        1 - (lam * hard + (1 - lam) * hard[perm]))
    soft = smooth_labels(labels, 5, eps).astype(np.float64)
    smoothed_then_mixed = lam * soft + (1 - lam) * soft[perm]
    np.testing.assert_allclose(mixed_then_smoothed, smoothed_then_mixed, atol=1e-7)


def test_mix_batch_alternates():
    policy = AugPolicy()
    kinds = Counter(mix_batch(_batch(), policy, np.random.default_rng(s)).mix for s in range(400))
    assert set(kinds) == {"mixup", "cutmix"}
    # P(mixup) = 0.8 * 0.5, P(cutmix) = 0.6 with cutmix_prob = 1
    assert abs(kinds["mixup"] / 400 - 0.4) < 0.08


# -- random erasing ------------------------------------------------------------

def test_erasing_prob_zero_is_identity():
    img = np.random.default_rng(0).random((3, 16, 16)).astype(np.float32)
    out = random_erasing(img, 0.0, np.random.default_rng(1))
    assert out is img or np.array_equal(out, img)


def test_erasing_prob_one_changes_one_rectangle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        img = rng.random((3, 16, 16)).astype(np.float32)
        out, box = random_erasing(img, 1.0, rng, return_box=True)
        y0, y1, x0, x1 = box
        mask = np.zeros((16, 16), bool)
        mask[y0:y1, x0:x1] = True
        np.testing.assert_array_equal(out[:, ~mask], img[:, ~mask])
        assert np.all(out[:, mask] != img[:, mask])


def test_erase_box_geometry():
    rng = np.random.default_rng(3)
    for _ in range(500):
        y0, y1, x0, x1 = erase_box(32, 32, rng)
        assert 0 <= y0 < y1 <= 32 and 0 <= x0 < x1 <= 32


def test_erasing_frequency():
    rng = np.random.default_rng(4)
    img = np.zeros((3, 8, 8), np.float32)
    hits = sum(random_erasing(img, 0.25, rng, return_box=True)[1] is not None
               for _ in range(10_000))
    assert abs(hits / 10_000 - 0.25) <= 0.02


# -- rand augment --------------------------------------------------------------

def test_magnitude_zero_is_identity_for_every_op():
    img = np.random.default_rng(5).random((3, 16, 16)).astype(np.float32)
    for name, op in RANDAUG_OPS.items():
        for sign in (1.0, -1.0):
            np.testing.assert_allclose(op(img, 0.0, sign), img, atol=1e-6, err_msg=name)
    out = rand_augment_lite(img, 0, 4, np.random.default_rng(0), prob=1.0)
    np.testing.assert_allclose(out, img, atol=1e-6)


def test_rotate_zero_identity():
    img = np.random.default_rng(6).random((3, 9, 9)).astype(np.float32)
    np.testing.assert_allclose(rotate(img, 0.0), img, atol=1e-6)


def test_rand_augment_deterministic():
    img = np.random.default_rng(7).random((3, 16, 16)).astype(np.float32)
    a = rand_augment_lite(img, 9, 2, np.random.default_rng(11))
    b = rand_augment_lite(img, 9, 2, np.random.default_rng(11))
    np.testing.assert_array_equal(a, b)


def test_rand_augment_rejects_magnitude():
    with pytest.raises(ParameterError):
        rand_augment_lite(np.zeros((3, 4, 4)), 11, 1, np.random.default_rng(0))


# -- normalisation and pipeline --------------------------------------------------

def test_normalize_roundtrip():
    rng = np.random.default_rng(8)
    img = rng.random((3, 5, 5))
    mean, std = rng.random(3), rng.random(3) + 0.1
    np.testing.assert_allclose(denormalize(normalize(img, mean, std), mean, std), img, atol=1e-12)


def test_policy_defaults_and_validation():
    p = AugPolicy()
    assert (p.mixup_prob, p.cutmix_prob, p.erasing_prob) == (0.8, 1.0, 0.25)
    assert (p.randaug_magnitude, p.randaug_prob, p.repeated_aug_m) == (9, 0.5, 3)
    assert AugPolicy.off().is_identity and not p.is_identity
    with pytest.raises(ParameterError):
        AugPolicy(mixup_prob=1.5)


def test_pipeline_determinism_and_order_independence():
    data = synth_dataset("blobs", 60, 3, resolution=16, seed=0)
    pipe = Pipeline(data, AugPolicy(), seed=5)
    a = list(pipe.epoch(0, 12))
    b = list(Pipeline(data, AugPolicy(), seed=5).epoch(0, 12))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.images, y.images)
        np.testing.assert_array_equal(x.targets, y.targets)
    # per-sample streams: augmenting in reverse order gives the same views
    idx, slots = a[0].indices, a[0].slots
    fwd = [pipe.augment_one(i, 0, s) for i, s in zip(idx, slots)]
    rev = [pipe.augment_one(i, 0, s) for i, s in zip(idx[::-1], slots[::-1])][::-1]
    for u, v in zip(fwd, rev):
        np.testing.assert_array_equal(u, v)


def test_pipeline_repeats_get_distinct_views():
    data = synth_dataset("blobs", 60, 3, resolution=16, seed=0)
    pipe = Pipeline(data, AugPolicy(mixup_prob=0, cutmix_prob=0), seed=1)
    batch = next(pipe.epoch(0, 12))
    assert batch.indices[0] == batch.indices[1] == batch.indices[2]
    assert not np.array_equal(batch.images[0], batch.images[1])
    np.testing.assert_allclose(batch.targets.sum(1), 1.0, atol=1e-5)


def test_pipeline_targets_sum_to_one_with_full_policy():
    data = synth_dataset("stripes", 90, 5, resolution=16, seed=0)
    for batch in Pipeline(data, AugPolicy(), seed=2).epoch(1, 15):
        assert np.abs(batch.targets.sum(1) - 1).max() <= 1e-5
