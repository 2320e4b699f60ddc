"""Diagnostics: accuracy per head, classifier disagreement, token similarity, throughput."""
import csv
import math
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .distill import joint_predict
from .errors import ContractError, ParameterError


def _batches(n, batch_size):
    for i in range(0, n, batch_size):
        yield slice(i, min(n, i + batch_size))


def predict_logits(model, dataset, batch_size=256):
    """Eval-mode (class_logits, distill_logits or None) over a whole dataset."""
    if dataset.resolution != model.resolution:
        raise ContractError(f"dataset resolution {dataset.resolution} differs from the "
                            f"model's {model.resolution}")
    cls_out, dist_out = [], []
    with T.no_grad():
        for sl in _batches(len(dataset), batch_size):
            out = model.forward(dataset.normalized(np.arange(sl.start, sl.stop)))
            cls_out.append(out.class_logits.data)
            if out.distill_logits is not None:
                dist_out.append(out.distill_logits.data)
    return np.concatenate(cls_out), (np.concatenate(dist_out) if dist_out else None)


def evaluate(model, dataset, batch_size=256):
    """Top-1 accuracy of the class head, the distillation head and their late fusion."""
    zc, zd = predict_logits(model, dataset, batch_size)
    y = dataset.labels
    acc = {"class": float((zc.argmax(1) == y).mean()), "distill": None, "fusion": None}
    if zd is not None:
        acc["distill"] = float((zd.argmax(1) == y).mean())
        acc["fusion"] = float((joint_predict(zc, zd).labels == y).mean())
    return acc


def head_predictions(model, dataset, batch_size=256):
    """Label predictions keyed by head: class, distill, fusion (when a distill head exists)."""
    zc, zd = predict_logits(model, dataset, batch_size)
    out = {"class": zc.argmax(1)}
    if zd is not None:
        out["distill"] = zd.argmax(1)
        out["fusion"] = joint_predict(zc, zd).labels
    return out


@dataclass
class DisagreementMatrix:
    names: list
    matrix: np.ndarray
    n: int

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([""] + list(self.names))
            for name, row in zip(self.names, self.matrix):
                w.writerow([name] + [repr(float(v)) for v in row])


def disagreement_matrix(classifiers, inputs=None, groundtruth=None):
    """Pairwise fraction of samples on which two classifiers disagree.

    ``classifiers`` maps names to prediction arrays or to callables applied once
    to ``inputs``.  ``groundtruth`` labels, when given, enter as a pseudo-classifier.
    """
    preds = {}
    for name, c in classifiers.items():
        preds[name] = np.asarray(c(inputs) if callable(c) else c)
    if groundtruth is not None:
        preds = {"groundtruth": np.asarray(groundtruth), **preds}
    if len(preds) < 2:
        raise ParameterError("need at least two classifiers")
    names = list(preds)
    P = np.stack([preds[n] for n in names])
    n = P.shape[1]
    if n == 0:
        raise ParameterError("empty dataset")
    M = (P[:, None, :] != P[None, :, :]).mean(axis=2)
    return DisagreementMatrix(names, M, n)


def cosine(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _row_cosines(x):
    c, d = x[:, 0].astype(np.float64), x[:, 1].astype(np.float64)
    return (c * d).sum(1) / (np.linalg.norm(c, axis=1) * np.linalg.norm(d, axis=1))


def token_cosine_similarity(model, dataset, batch_size=256, limit=None):
    """Cosine between class and distillation tokens.

    Returns ``{"parameters": cos of the learned token vectors, "input": same as
    parameters, "layers": [mean activation cosine after block 1..L],
    "final": mean cosine of the normalised embeddings fed to the two heads}``.
    """
    if model.dist_token is None:
        raise ContractError("model has no distillation token")
    n = len(dataset) if limit is None else min(limit, len(dataset))
    sums, final = np.zeros(len(model.blocks)), 0.0
    with T.no_grad():
        for sl in _batches(n, batch_size):
            out = model.forward(dataset.normalized(np.arange(sl.start, sl.stop)),
                                return_layers=True)
            for i, x in enumerate(out.layer_tokens[1:]):
                sums[i] += _row_cosines(x.data).sum()
            final += _row_cosines(out.tokens_out.data).sum()
    p = cosine(model.cls_token.data[0], model.dist_token.data[0])
    return {"parameters": p, "input": p, "layers": (sums / n).tolist(), "final": final / n}


def throughput_bench(model, batch_sizes, warmup=5, runs=30, resolution=None, seed=0):
    """Images/second of eval-mode forward passes (monotonic clock, no data loading).

    Failures at a batch size (e.g. out of memory) are reported in the row instead
    of aborting.
    """
    r = resolution or model.resolution
    rng = np.random.default_rng(seed)
    rows = []
    for bs in batch_sizes:
        try:
            x = rng.standard_normal((bs, 3, r, r)).astype(T.get_default_dtype())
            with T.no_grad():
                for _ in range(warmup):
                    model.forward(x)
                times = []
                for _ in range(runs):
                    t0 = time.perf_counter()
                    model.forward(x)
                    times.append(time.perf_counter() - t0)
            mean_t = float(np.mean(times))
            rows.append({"batch_size": bs, "resolution": r, "mean_seconds": mean_t,
                         "images_per_second": bs / mean_t, "error": ""})
        except MemoryError as e:
            rows.append({"batch_size": bs, "resolution": r, "mean_seconds": math.nan,
                         "images_per_second": math.nan, "error": f"MemoryError: {e}"})
    return rows


def write_rows(path, rows, columns=None):
    columns = columns or list(rows[0])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
