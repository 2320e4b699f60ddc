"""Command-line entry point: ``deit <command> [options]``.

Commands: train, distill, train-teacher, finetune, eval, analyze, bench.
Configuration comes from a flat dotted-key JSON file (``--config``), then
``--set key=value`` pairs, then the dedicated flags, in that order of precedence.
Thread count for BLAS is taken from ``DEIT_NUM_THREADS`` (or ``--threads``).
"""
import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext

import numpy as np

from . import checkpoint as ckpt_io
from .analysis import (disagreement_matrix, evaluate, head_predictions, throughput_bench,
                       token_cosine_similarity, write_rows)
from .config import RunConfig, desk_config
from .data import load_cifar10, synth_dataset
from .distill import MODES as DISTILL_MODES, Teacher
from .errors import DeiTError, UsageError
from .model import DeiTModel, preset
from .optim import EMA_DEFAULT_DECAY
from .resolution import finetune, finetune_config
from .teacher_zoo import TEACHER_KINDS, train_teacher
from .train import train

THREADS_ENV = "DEIT_NUM_THREADS"
CHECKPOINT_NAME = "checkpoint.deit"

log = logging.getLogger("deit")

SYNTH_DEFAULTS = {"n": 2000, "classes": 4, "res": 32, "noise": None, "seed": None, "split": 0}


# -- datasets ------------------------------------------------------------------

def _parse_spec(spec):
    """``synth:KIND[:k=v,...]`` or ``cifar10:PATH`` -> (source, target, options)."""
    source, _, rest = spec.partition(":")
    if source == "cifar10":
        if not rest:
            raise UsageError("cifar10 dataset needs a path, e.g. cifar10:/data/cifar-10-batches-bin")
        return source, rest, {}
    if source != "synth":
        raise UsageError(f"unknown dataset source {source!r}; use synth:KIND or cifar10:PATH")
    kind, _, opts = rest.partition(":")
    options = {}
    for item in filter(None, opts.split(",")):
        key, sep, value = item.partition("=")
        if not sep or key not in SYNTH_DEFAULTS:
            raise UsageError(f"bad synthetic option {item!r}; keys are {sorted(SYNTH_DEFAULTS)}")
        options[key] = float(value) if key == "noise" else int(value)
    return source, kind or "blobs", options


def load_datasets(spec, eval_spec=None, seed=0, rescale=None):
    """Training split plus an evaluation split normalised with training statistics."""
    train_set, eval_set = _load_pair(spec, eval_spec, seed)
    if rescale:
        train_set = train_set.resized(rescale)
        eval_set = eval_set.resized(rescale) if eval_set is not None else None
    return train_set, eval_set


def _load_pair(spec, eval_spec, seed):
    source, target, opts = _parse_spec(spec)
    if source == "cifar10":
        train_set = load_cifar10(target, "train")
        eval_set = None
        if eval_spec is None and os.path.isdir(target):
            try:
                eval_set = load_cifar10(target, "test", stats=(train_set.mean, train_set.std))
            except DeiTError:
                eval_set = None
    else:
        o = {**SYNTH_DEFAULTS, **opts}
        data_seed = seed if o["seed"] is None else o["seed"]
        train_set = synth_dataset(target, o["n"], o["classes"], o["res"], seed=data_seed,
                                  split=o["split"], noise=o["noise"])
        eval_set = None
        if eval_spec is None:
            eval_set = synth_dataset(target, max(o["classes"], o["n"] // 4), o["classes"], o["res"],
                                     seed=data_seed, split=o["split"] + 1, noise=o["noise"])
    if eval_spec is not None:
        eval_set = load_datasets(eval_spec, seed=seed)[0]
    if eval_set is not None:
        eval_set = eval_set.with_stats(train_set.mean, train_set.std)
    return train_set, eval_set


def _eval_set_from(args, ckpt, seed):
    """Dataset for eval/analyze, normalised with the stats stored in the checkpoint."""
    data, _ = load_datasets(args.dataset, seed=seed)
    meta = ckpt.config.get("data", {})
    if "mean" in meta:
        data = data.with_stats(meta["mean"], meta["std"])
    return data


# -- configuration -------------------------------------------------------------

def _coerce(value):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def build_config(args, base=None):
    flat = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            flat.update(json.load(f))
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        flat[key] = _coerce(value)
    flags = {"model.preset": getattr(args, "preset", None),
             "optim.total_epochs": getattr(args, "epochs", None),
             "optim.batch_size": getattr(args, "batch_size", None),
             "optim.base_lr": getattr(args, "lr", None),
             "run.seed": getattr(args, "seed", None),
             "run.out_dir": getattr(args, "out", None),
             "run.dataset": getattr(args, "dataset", None),
             "run.teacher": getattr(args, "teacher", None),
             "distill.mode": getattr(args, "mode", None),
             "optim.ema_decay": EMA_DEFAULT_DECAY if getattr(args, "ema", False) else None}
    flat.update({k: v for k, v in flags.items() if v is not None})
    base = base if base is not None else desk_config()
    epochs = flat.get("optim.total_epochs")
    if epochs is not None and "optim.warmup_epochs" not in flat:
        flat["optim.warmup_epochs"] = min(base.optim.warmup_epochs, epochs)
    return RunConfig.from_flat(flat, base)


def load_teacher(path):
    ck = ckpt_io.load_checkpoint(path)
    model = ckpt_io.build_model(ck)
    return Teacher(model, model.resolution, name=ck.config.get("teacher_kind", "teacher"))


def _threads(args):
    n = args.threads or os.environ.get(THREADS_ENV)
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


# -- commands ------------------------------------------------------------------

def cmd_train(args, distill=False):
    cfg = build_config(args)
    mode = cfg.distill.mode
    if distill and mode == "none":
        raise UsageError("distill needs --mode soft, hard or token")
    if mode != "none" and not cfg.run.teacher:
        raise UsageError(f"distill mode {mode!r} requires --teacher CHECKPOINT")
    if not cfg.run.dataset:
        raise UsageError("--dataset is required")
    train_set, eval_set = load_datasets(cfg.run.dataset, cfg.run.eval_dataset or None,
                                        seed=cfg.run.seed, rescale=args.rescale)
    teacher = load_teacher(cfg.run.teacher) if mode != "none" else None
    extra = {"use_distill_token": mode == "token"}
    extra.update({k: v for k, v in cfg.model.items() if k == "use_distill_token"})
    model_cfg = cfg.model_config(train_set.num_classes, image_size=train_set.resolution, **extra)
    model = DeiTModel(model_cfg, seed=cfg.run.seed)
    out = cfg.run.out_dir
    os.makedirs(out, exist_ok=True)
    cfg.save(os.path.join(out, "config.json"))
    train(model, train_set, cfg, teacher=teacher, eval_dataset=eval_set, out_dir=out,
          log=log.info, teacher_kind=teacher.name if teacher else None)
    print(os.path.join(out, CHECKPOINT_NAME))
    return 0


def cmd_train_teacher(args):
    cfg = build_config(args)
    if not cfg.run.dataset:
        raise UsageError("--dataset is required")
    train_set, eval_set = load_datasets(cfg.run.dataset, cfg.run.eval_dataset or None,
                                        seed=cfg.run.seed, rescale=args.rescale)
    out = cfg.run.out_dir
    os.makedirs(out, exist_ok=True)
    cfg.save(os.path.join(out, "config.json"))
    train_teacher(args.kind, train_set, cfg, eval_dataset=eval_set, out_dir=out, log=log.info)
    print(os.path.join(out, CHECKPOINT_NAME))
    return 0


def cmd_finetune(args):
    ck = ckpt_io.load_checkpoint(args.checkpoint)
    model = ckpt_io.build_model(ck)
    if not isinstance(model, DeiTModel):
        raise UsageError("finetune expects a transformer checkpoint")
    stored = ck.config.get("run", {})
    base = finetune_config(RunConfig.from_flat(stored) if stored else desk_config())
    train_steps = args.epochs != 0
    if not train_steps:
        args.epochs = None
    cfg = build_config(args, base=base)
    out = args.out or os.path.join(os.path.dirname(args.checkpoint) or ".", f"ft{args.resolution}")
    os.makedirs(out, exist_ok=True)
    train_set = eval_set = None
    if args.dataset and train_steps:
        train_set, eval_set = load_datasets(args.dataset, seed=cfg.run.seed,
                                            rescale=args.rescale)
        meta = ck.config.get("data", {})
        if "mean" in meta:
            train_set = train_set.with_stats(meta["mean"], meta["std"])
            eval_set = eval_set.with_stats(meta["mean"], meta["std"]) if eval_set else None
    teacher = None
    if train_set is not None and cfg.distill.mode != "none":
        if not cfg.run.teacher:
            raise UsageError(f"distill mode {cfg.distill.mode!r} requires --teacher CHECKPOINT")
        teacher = load_teacher(cfg.run.teacher)
    new = finetune(model, args.resolution, cfg if train_set is not None else None, train_set,
                   teacher, eval_set, out_dir=out if train_set is not None else None,
                   log=log.info)
    if train_set is None:
        meta = {k: v for k, v in ck.config.items() if k not in ("arch", "model", "resolution")}
        meta["finetuned_from"] = ck.config.get("resolution")
        ckpt_io.save_checkpoint(os.path.join(out, CHECKPOINT_NAME),
                                ckpt_io.model_checkpoint(new, meta))
    print(os.path.join(out, CHECKPOINT_NAME))
    return 0


def _acc_str(v):
    return "n/a" if v is None else f"{100 * v:.2f}%"


def cmd_eval(args):
    ck = ckpt_io.load_checkpoint(args.checkpoint)
    model = ckpt_io.build_model(ck)
    data = _eval_set_from(args, ck, args.seed or 0)
    acc = evaluate(model, data)
    print(f"class-head top-1:   {_acc_str(acc['class'])}")
    print(f"distill-head top-1: {_acc_str(acc['distill'])}")
    print(f"late-fusion top-1:  {_acc_str(acc['fusion'])}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(acc, f, indent=2)
    return 0


def cmd_analyze(args):
    ck = ckpt_io.load_checkpoint(args.checkpoint)
    model = ckpt_io.build_model(ck)
    data = _eval_set_from(args, ck, args.seed or 0)
    out = args.out or os.path.join(os.path.dirname(args.checkpoint) or ".", "analysis")
    os.makedirs(out, exist_ok=True)

    acc = evaluate(model, data)
    write_rows(os.path.join(out, "accuracy.csv"),
               [{"head": k, "top1": v if v is not None else ""} for k, v in acc.items()])

    preds = {f"student_{k}": v for k, v in head_predictions(model, data).items()}
    if args.teacher:
        teacher = load_teacher(args.teacher)
        logits = np.concatenate([teacher(data.normalized(np.arange(i, min(len(data), i + 256))))
                                 for i in range(0, len(data), 256)])
        preds = {"teacher": logits.argmax(1), **preds}
    if len(preds) + 1 >= 2:
        m = disagreement_matrix(preds, groundtruth=data.labels)
        m.to_csv(os.path.join(out, "disagreement.csv"))

    if getattr(model, "dist_token", None) is not None:
        tc = token_cosine_similarity(model, data)
        rows = [{"layer": "parameters", "cosine": tc["parameters"]},
                {"layer": "input", "cosine": tc["input"]}]
        rows += [{"layer": str(i + 1), "cosine": c} for i, c in enumerate(tc["layers"])]
        rows.append({"layer": "final", "cosine": tc["final"]})
        write_rows(os.path.join(out, "token_cosine.csv"), rows)
    print(out)
    return 0


def cmd_bench(args):
    sizes = [int(s) for s in args.batch_sizes.split(",")]
    rows = []
    if args.checkpoint:
        models = [("checkpoint", ckpt_io.build_model(ckpt_io.load_checkpoint(args.checkpoint)))]
    else:
        names = args.preset.split(",") if args.preset else ["deit-micro"]
        models = []
        for name in names:
            cfg = preset(name)
            if args.resolution:
                cfg = preset(name, image_size=args.resolution)
            models.append((name, DeiTModel(cfg, seed=0)))
    for name, model in models:
        for r in throughput_bench(model, sizes, warmup=args.warmup, runs=args.runs):
            rows.append({"model": name, **r})
            log.info("%s bs=%d %.1f img/s", name, r["batch_size"], r["images_per_second"])
    out = args.out or "throughput.csv"
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    write_rows(out, rows)
    print(out)
    return 0


# -- parser --------------------------------------------------------------------

def _run_flags(p, teacher=False):
    p.add_argument("--config", help="flat dotted-key JSON config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--preset")
    p.add_argument("--dataset", help="synth:KIND[:n=..,classes=..,noise=..] or cifar10:PATH")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="base learning rate (scaled by batch/512)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--ema", action="store_true",
                   help=f"track and evaluate a parameter EMA (decay {EMA_DEFAULT_DECAY})")
    p.add_argument("--rescale", type=int, metavar="R", help="resize all images to R x R")
    if teacher:
        p.add_argument("--teacher", help="teacher checkpoint")


def build_parser():
    parser = argparse.ArgumentParser(prog="deit", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, help=f"BLAS threads (default ${THREADS_ENV})")
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a student (distill mode from config)")
    _run_flags(p, teacher=True)
    p.add_argument("--mode", choices=DISTILL_MODES)

    p = sub.add_parser("distill", help="train a student against a teacher checkpoint")
    _run_flags(p, teacher=True)
    p.add_argument("--mode", choices=DISTILL_MODES, default="token")

    p = sub.add_parser("train-teacher", help="train an in-repo teacher")
    _run_flags(p)
    p.add_argument("--kind", choices=TEACHER_KINDS, default="convnet")

    p = sub.add_parser("finetune", help="move a checkpoint to a new resolution")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=int, required=True)
    _run_flags(p, teacher=True)
    p.add_argument("--mode", choices=DISTILL_MODES)

    p = sub.add_parser("eval", help="print class, distill and fusion accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--json", help="also write the report as JSON")

    p = sub.add_parser("analyze", help="write disagreement, token-cosine and accuracy CSVs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--teacher")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = sub.add_parser("bench", help="forward throughput table")
    p.add_argument("--preset", help="comma-separated presets (default deit-micro)")
    p.add_argument("--checkpoint")
    p.add_argument("--resolution", type=int)
    p.add_argument("--batch-sizes", default="1,16,64")
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--runs", type=int, default=30)
    p.add_argument("--out")
    return parser


COMMANDS = {"train": cmd_train, "distill": lambda a: cmd_train(a, distill=True),
            "train-teacher": cmd_train_teacher, "finetune": cmd_finetune, "eval": cmd_eval,
            "analyze": cmd_analyze, "bench": cmd_bench}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        with _threads(args):
            return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"deit {args.command}: usage error: {e}", file=sys.stderr)
        return 2
    except DeiTError as e:
        print(f"deit {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
