"""Training loop shared by students, teachers and fine-tuning."""
import csv
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt_io
from .analysis import evaluate
from .augment import Pipeline, steps_per_epoch
from .distill import TeacherCache, distillation_loss
from .errors import ContractError, ParameterError, UsageError
from .optim import EMA, lr_at, make_optimizer

log_ = logging.getLogger("deit.train")

METRICS_COLUMNS = ["epoch", "lr", "train_loss", "eval_top1", "eval_top1_class",
                   "eval_top1_distill", "eval_top1_ema", "distinct_images"]


@dataclass
class TrainResult:
    model: object
    metrics: list = field(default_factory=list)
    ema: EMA | None = None
    optimizer: object = None


@contextmanager
def run_lock(out_dir):
    """Exclusive ownership of an output directory for the life of a run."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UsageError(f"{out_dir} is locked by another run (remove {path} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        os.unlink(path)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in METRICS_COLUMNS])


def _ema_model(model, ema):
    shadow = model.copy()
    shadow.load_state_dict(ema.shadow)
    return shadow


def train(model, dataset, cfg, teacher=None, eval_dataset=None, out_dir=None, log=None,
          role="student", teacher_kind=None, extra_meta=None):
    """Train ``model`` in place following ``cfg`` (a :class:`~deit.config.RunConfig`).

    Writes ``metrics.csv`` and a checkpoint per epoch when ``out_dir`` is set.
    """
    log = log or log_.info
    mode = cfg.distill.mode
    if mode != "none" and teacher is None:
        raise UsageError(f"distill mode {mode!r} requires a teacher")
    if teacher is not None and mode != "none" and teacher.resolution != model.resolution:
        raise ContractError(f"teacher resolution {teacher.resolution} differs from the "
                            f"student's {model.resolution}")
    if dataset.resolution != model.resolution:
        raise ParameterError(f"dataset resolution {dataset.resolution} differs from the "
                             f"model's {model.resolution}")
    bs = cfg.optim.batch_size
    if bs % cfg.aug.repeated_aug_m:
        raise ParameterError(f"batch size {bs} is not divisible by the repeated-augmentation "
                             f"count {cfg.aug.repeated_aug_m}")
    seed = cfg.run.seed
    spe = steps_per_epoch(len(dataset), bs)
    if spe == 0:
        raise ParameterError(f"dataset of {len(dataset)} samples is smaller than a batch ({bs})")
    epochs = int(round(cfg.optim.total_epochs))
    pipeline = Pipeline(dataset, cfg.aug, seed, cfg.distill.label_smoothing,
                        cfg.distill.smoothing_spread)
    named = model.named_parameters()
    opt = make_optimizer(named, cfg.optim)
    ema = EMA(named, cfg.optim.ema_decay) if cfg.optim.ema_decay is not None else None
    cache = None
    if teacher is not None and mode in ("hard", "token") and cfg.run.teacher_cache:
        if not cfg.aug.is_identity:
            raise ContractError("teacher logit cache requires augmentation to be disabled")
        cache = TeacherCache(teacher, dataset.normalized())

    meta = {"role": role, "data": {"mean": dataset.mean.tolist(), "std": dataset.std.tolist(),
                                   "num_classes": dataset.num_classes, "name": dataset.name},
            "run": cfg.to_flat()}
    if teacher_kind:
        meta["teacher_kind"] = teacher_kind
    if extra_meta:
        meta.update(extra_meta)

    result = TrainResult(model, [], ema, opt)

    def _loop():
        step = 0
        for epoch in range(epochs):
            losses, seen = [], set()
            lr = 0.0
            for b, batch in enumerate(pipeline.epoch(epoch, bs)):
                lr = lr_at(step, spe, cfg.optim)
                rng = np.random.default_rng([seed, epoch, b, 7])
                out = model.forward(batch.images, training=True, rng=rng)
                t_logits = None
                if mode != "none":
                    t_logits = cache[batch.indices] if cache is not None else teacher(batch.images)
                loss = distillation_loss(out, batch.targets, t_logits, cfg.distill)
                loss.backward()
                opt.step(lr)
                opt.zero_grad()
                if ema is not None:
                    ema.update(named)
                losses.append(float(loss.data))
                seen.update(batch.indices.tolist())
                step += 1
            row = {"epoch": epoch + 1, "lr": lr, "train_loss": float(np.mean(losses)),
                   "distinct_images": len(seen)}
            if eval_dataset is not None:
                acc = evaluate(model, eval_dataset, cfg.run.eval_batch_size)
                row["eval_top1"] = acc["fusion"] if acc["distill"] is not None else acc["class"]
                row["eval_top1_class"] = acc["class"]
                row["eval_top1_distill"] = acc["distill"]
                if ema is not None:
                    e = evaluate(_ema_model(model, ema), eval_dataset, cfg.run.eval_batch_size)
                    row["eval_top1_ema"] = e["fusion"] if e["distill"] is not None else e["class"]
            result.metrics.append(row)
            log(f"epoch {epoch + 1}/{epochs} lr={lr:.3g} loss={row['train_loss']:.4f} "
                f"top1={row.get('eval_top1')}")
            if out_dir is not None:
                write_metrics(os.path.join(out_dir, "metrics.csv"), result.metrics)
                if (epoch + 1) % cfg.run.checkpoint_every == 0 or epoch + 1 == epochs:
                    ck = ckpt_io.model_checkpoint(model, {**meta, "epoch": epoch + 1}, opt, ema)
                    ckpt_io.save_checkpoint(os.path.join(out_dir, "checkpoint.deit"), ck)

    if out_dir is not None:
        with run_lock(out_dir):
            _loop()
    else:
        _loop()
    return result
