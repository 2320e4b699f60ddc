"""Training objectives: smoothed cross-entropy, soft and hard-label distillation.

Teacher logits never enter the gradient tape; they are plain arrays by the time
they reach a loss.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ParameterError, ShapeError

MODES = ("none", "soft", "hard", "token")
KL_ORDERS = ("student_teacher", "teacher_student")


@dataclass
class DistillConfig:
    mode: str = "none"
    tau: float = 3.0
    lam: float = 0.1
    label_smoothing: float = 0.1
    # "student_teacher" evaluates KL(psi(Zs/tau) || psi(Zt/tau)) as literally written;
    # "teacher_student" is the usual Hinton direction.
    kl_order: str = "student_teacher"
    smoothing_spread: str = "others"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"distill mode must be one of {MODES}, got {self.mode!r}")
        if self.tau <= 0:
            raise ParameterError(f"temperature must be positive, got {self.tau}")
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"lambda must be in [0, 1], got {self.lam}")
        _check_eps(self.label_smoothing)
        if self.kl_order not in KL_ORDERS:
            raise ParameterError(f"kl_order must be one of {KL_ORDERS}")


def _check_eps(eps):
    if not 0.0 <= eps < 1.0:
        raise ParameterError(f"label smoothing must be in [0, 1), got {eps}")


def smooth_labels(labels, num_classes, eps, spread="others"):
    """One-hot rows with 1-eps on the label and eps spread over the rest.

    ``spread="others"`` shares eps across the C-1 other classes;
    ``spread="uniform"`` mixes eps/C into every class (the timm convention).
    """
    _check_eps(eps)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ParameterError(f"labels must lie in [0, {num_classes})")
    dtype = T.get_default_dtype()
    if spread == "others":
        off = eps / (num_classes - 1) if num_classes > 1 else 0.0
        on = 1.0 - eps
    elif spread == "uniform":
        off = eps / num_classes
        on = 1.0 - eps + off
    else:
        raise ParameterError(f"unknown smoothing spread {spread!r}")
    out = np.full((labels.shape[0], num_classes), off, dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = on
    return out.astype(dtype)


def _as_target(target, logits, eps, spread):
    B, C = logits.shape
    target = np.asarray(target)
    if target.ndim == 1:
        if target.shape[0] != B:
            raise ShapeError(f"labels {target.shape} do not match logits {logits.shape}")
        return smooth_labels(target, C, eps, spread)
    if target.shape != (B, C):
        raise ShapeError(f"soft targets {target.shape} do not match logits {logits.shape}")
    rows = target.sum(axis=1)
    if np.any(np.abs(rows - 1.0) > 1e-5):
        raise ContractError("soft target rows must sum to 1 within 1e-5")
    return target.astype(logits.dtype, copy=False)


def cross_entropy_smoothed(logits, target, eps=0.1, spread="others"):
    """Batch-mean cross-entropy against smoothed hard labels or ready-made soft rows.

    Soft targets (e.g. from Mixup/CutMix) are used as given; smoothing of their
    hard components happens before mixing.
    """
    _check_eps(eps)
    logits = T.as_tensor(logits)
    t = _as_target(target, logits, eps, spread)
    logp = T.log_softmax(logits)
    return T.scale(T.sum_(logp * T.Tensor(t)), -1.0 / logits.shape[0])


def _teacher_array(z_t):
    return z_t.data if isinstance(z_t, T.Tensor) else np.asarray(z_t)


def kl_divergence(z_student, z_teacher, tau, order="student_teacher"):
    """Batch-mean KL between temperature-softened distributions."""
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z_student = T.as_tensor(z_student)
    zt = _teacher_array(z_teacher).astype(z_student.dtype, copy=False)
    if zt.shape != z_student.shape:
        raise ShapeError(f"student logits {z_student.shape} vs teacher {zt.shape}")
    log_p = T.log_softmax(T.scale(z_student, 1.0 / tau))
    log_q = T.Tensor(np.asarray(T.log_softmax(T.Tensor(zt / zt.dtype.type(tau))).data))
    if order == "student_teacher":
        kl = T.sum_(T.exp(log_p) * (log_p - log_q))
    elif order == "teacher_student":
        kl = T.sum_(T.Tensor(np.exp(log_q.data)) * (log_q - log_p))
    else:
        raise ParameterError(f"kl order must be one of {KL_ORDERS}")
    return T.scale(kl, 1.0 / z_student.shape[0])


def soft_distill_loss(z_student, z_teacher, y, tau=3.0, lam=0.1, eps=0.1,
                      kl_order="student_teacher", z_student_kl=None, spread="others"):
    """(1 - lam) * CE(psi(Zs), y) + lam * tau^2 * KL(psi(Zs/tau), psi(Zt/tau)).

    ``z_student_kl`` lets the KL half read a different head (distillation token).
    """
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    ce = cross_entropy_smoothed(z_student, y, eps, spread)
    if lam == 0.0:
        return ce
    kl_in = z_student if z_student_kl is None else z_student_kl
    kl = kl_divergence(kl_in, z_teacher, tau, kl_order)
    return T.scale(ce, 1.0 - lam) + T.scale(kl, lam * tau * tau)


def teacher_labels(z_teacher):
    """Hard teacher decision; ties resolve to the lowest class index."""
    return np.argmax(_teacher_array(z_teacher), axis=-1)


def hard_distill_loss(z_class, z_distill, y, z_teacher, eps=0.1, spread="others"):
    """1/2 CE(class head, y) + 1/2 CE(distill head, argmax teacher).

    Pass the same logits twice for plain hard distillation without a token.
    """
    y_t = teacher_labels(z_teacher)
    ce_true = cross_entropy_smoothed(z_class, y, eps, spread)
    ce_teacher = cross_entropy_smoothed(z_distill, y_t, eps, spread)
    return T.scale(ce_true, 0.5) + T.scale(ce_teacher, 0.5)


def distillation_loss(out, targets, teacher_logits, cfg):
    """Route a model's :class:`ForwardOutput` to the loss selected by ``cfg.mode``."""
    eps, spread = cfg.label_smoothing, cfg.smoothing_spread
    if cfg.mode == "none":
        return cross_entropy_smoothed(out.class_logits, targets, eps, spread)
    if teacher_logits is None:
        raise ContractError(f"distill mode {cfg.mode!r} needs teacher logits")
    if cfg.mode == "soft":
        return soft_distill_loss(out.class_logits, teacher_logits, targets, cfg.tau, cfg.lam, eps,
                                 cfg.kl_order, z_student_kl=out.distill_logits, spread=spread)
    if cfg.mode == "hard":
        return hard_distill_loss(out.class_logits, out.class_logits, targets, teacher_logits, eps,
                                 spread)
    if out.distill_logits is None:
        raise ContractError("token mode needs a model with a distillation token")
    return hard_distill_loss(out.class_logits, out.distill_logits, targets, teacher_logits, eps,
                             spread)


@dataclass
class JointPrediction:
    scores: np.ndarray
    labels: np.ndarray
    fallback: bool = False


def _softmax_np(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def joint_predict(class_logits, distill_logits=None):
    """Late fusion: psi(class) + psi(distill); falls back to the class head alone."""
    zc = _teacher_array(class_logits)
    if distill_logits is None:
        scores = _softmax_np(zc)
        return JointPrediction(scores, scores.argmax(axis=-1), fallback=True)
    scores = _softmax_np(zc) + _softmax_np(_teacher_array(distill_logits))
    return JointPrediction(scores, scores.argmax(axis=-1))


class Teacher:
    """Frozen classifier wrapper: images -> logits, never recorded on the tape.

    ``model`` must expose ``logits(images)`` returning an array.  Models that pool
    globally (``resolution_agnostic = True``) can be rebound to another input size.
    """

    def __init__(self, model, resolution, name="teacher"):
        self.model = model
        self.resolution = int(resolution)
        self.name = name
        for p in getattr(model, "parameters", lambda: [])():
            p.requires_grad = False
            p.grad = None

    def __call__(self, images):
        images = np.asarray(images.data if isinstance(images, T.Tensor) else images)
        if images.shape[-1] != self.resolution or images.shape[-2] != self.resolution:
            raise ContractError(f"{self.name} expects {self.resolution}px inputs, "
                                f"got {images.shape[-2]}x{images.shape[-1]}")
        with T.no_grad():
            return np.asarray(self.model.logits(images))

    def at_resolution(self, resolution):
        if resolution == self.resolution:
            return self
        if not getattr(self.model, "resolution_agnostic", False):
            raise ContractError(f"{self.name} is fixed to {self.resolution}px")
        return Teacher(self.model, resolution, self.name)


def finetune_objective(out, targets, images, teacher, cfg, student_resolution):
    """Same loss family as pre-training, with the teacher evaluated at the student's size."""
    teacher_logits = None
    if cfg.mode != "none":
        if teacher is None:
            raise ContractError(f"distill mode {cfg.mode!r} needs a teacher")
        if teacher.resolution != student_resolution:
            raise ContractError(f"teacher runs at {teacher.resolution}px but the student "
                                f"is fine-tuned at {student_resolution}px")
        teacher_logits = teacher(images)
    return distillation_loss(out, targets, teacher_logits, cfg)


class TeacherCache:
    """Per-index teacher logits, valid only when inputs are not augmented."""

    def __init__(self, teacher, images, batch_size=256):
        chunks = [teacher(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
        self.logits = np.concatenate(chunks, axis=0)

    def __getitem__(self, idx):
        return self.logits[idx]
