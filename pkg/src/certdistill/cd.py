"""Certainty distillation.

A frozen teacher produces soft targets tempered per sample by a certainty
regulariser ``tau``; the student (a copy of the same source model) is fitted to
them with one SGD pass and finally temperature-scaled by the mean ``tau``.

``tau`` grows with how much more uncertain a sample looks than the source
training set did, and with how small its logit norm is relative to the source
median, so that low-entropy but low-norm samples are still smoothed.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .data import split_stream as _batches
from .errors import InputError, ParameterError
from .nn import BATCH_STATS, BN_MODES, RUNNING_STATS, Network, freeze_b_layers, sgd_step, softmax_temp, temperature_scale

LOSS_KINDS = ("per_class_bce", "soft_cross_entropy")
_CLAMP = metrics.LOG_CLAMP


@dataclass(frozen=True)
class SourceStats:
    h0: float  # mean entropy on the source training set, bits
    kappa: float  # median logit l2 norm on the source training set


@dataclass
class CDConfig:
    t_min: float = 1.2
    t_max: float = 5.0
    h_max: float | None = None  # None -> log2(C)
    beta: float = 0.0
    lr: float = 0.001
    batch_size: int = 50
    loss: str = "per_class_bce"
    epochs: int = 1
    refresh_teacher: bool = False
    bn_mode: str = RUNNING_STATS

    def __post_init__(self):
        if not 0 < self.t_min <= self.t_max:
            raise ParameterError("need 0 < t_min <= t_max")
        if self.h_max is not None and not self.h_max > 0:
            raise ParameterError("h_max must be positive")
        if not self.lr >= 0:
            raise ParameterError("lr must be non-negative")
        if not 0 <= self.beta <= 1:
            raise ParameterError("beta must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 1:
            raise ParameterError("batch_size and epochs must be >= 1")
        if self.loss not in LOSS_KINDS:
            raise ParameterError(f"loss must be one of {LOSS_KINDS}")
        if self.bn_mode not in BN_MODES:
            raise ParameterError(f"bn_mode must be one of {BN_MODES}")

    def resolved_h_max(self, num_classes: int) -> float:
        return math.log2(num_classes) if self.h_max is None else float(self.h_max)


@dataclass(frozen=True)
class TauVector:
    tau: np.ndarray

    @property
    def t_avg(self) -> float:
        return float(np.mean(self.tau))

    def __len__(self):
        return len(self.tau)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def _chunks(x, size=4096):
    for start in range(0, x.shape[0], size):
        yield x[start:start + size]


def compute_source_stats(network: Network, source_data) -> SourceStats:
    """Mean entropy (bits) and median logit norm of ``network`` on source features.

    Uses stored batch-norm statistics regardless of the network's current mode.
    """
    x = np.asarray(source_data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InputError("source data must be a non-empty 2-D feature matrix")
    mode = network.bn_mode
    network.bn_mode = RUNNING_STATS
    try:
        logits = np.concatenate([network.forward(chunk) for chunk in _chunks(x)])
    finally:
        network.bn_mode = mode
    return stats_from_logits(logits)


def stats_from_logits(logits) -> SourceStats:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if logits.shape[0] == 0:
        raise InputError("no logits")
    h = metrics.entropy_bits(softmax_temp(logits, 1.0))
    # np.median averages the two middle values for even counts.
    return SourceStats(h0=float(np.mean(h)), kappa=float(np.median(metrics.logit_norm(logits))))


def compute_tau(teacher_logits, stats: SourceStats, config: CDConfig) -> TauVector:
    logits = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
    if not stats.kappa > 0:
        raise ParameterError("kappa must be positive")
    h_max = config.resolved_h_max(logits.shape[1])
    h = metrics.entropy_bits(softmax_temp(logits, 1.0))
    e = _sigmoid(h - stats.h0)
    t = config.t_min + (e / h_max) * (config.t_max - config.t_min)
    ratio = metrics.logit_norm(logits) / stats.kappa
    factor = 1.0 + 0.4 * (1.5 - 1.5 * _sigmoid(ratio))
    return TauVector(factor * t)


def _check_loss_inputs(student, teacher):
    s = np.atleast_2d(np.asarray(student, dtype=np.float64))
    t = np.atleast_2d(np.asarray(teacher, dtype=np.float64))
    if s.shape != t.shape:
        raise InputError(f"student {s.shape} and teacher {t.shape} shapes differ")
    for p in (s, t):
        if np.any(p < 0) or np.any(p > 1):
            raise InputError("probabilities must lie in [0, 1]")
    return s, t


def cd_loss_terms(student_probs, teacher_probs, t_avg: float, kind: str = "per_class_bce") -> np.ndarray:
    """Per-sample distillation loss ``t_avg**2 * D(student, teacher)``."""
    if not t_avg > 0:
        raise ParameterError("t_avg must be positive")
    s, t = _check_loss_inputs(student_probs, teacher_probs)
    s = np.clip(s, _CLAMP, 1.0 - _CLAMP)
    if kind == "per_class_bce":
        d = -(t * np.log(s) + (1.0 - t) * np.log(1.0 - s)).mean(axis=1)
    elif kind == "soft_cross_entropy":
        d = -(t * np.log(s)).sum(axis=1)
    else:
        raise ParameterError(f"unknown loss kind {kind!r}")
    return t_avg ** 2 * d


def cd_loss(student_probs, teacher_probs, t_avg: float, kind: str = "per_class_bce") -> float:
    """Mean distillation loss over the rows given."""
    return float(np.mean(cd_loss_terms(student_probs, teacher_probs, t_avg, kind)))


def cd_loss_grad(student_probs, teacher_probs, t_avg: float, kind: str = "per_class_bce") -> np.ndarray:
    """Gradient of ``cd_loss`` (mean over rows) w.r.t. the student's T=1 logits."""
    s, t = _check_loss_inputs(student_probs, teacher_probs)
    n, c = s.shape
    if kind == "soft_cross_entropy":
        g = t_avg ** 2 * (s * t.sum(axis=1, keepdims=True) - t)
        return g / n
    if kind != "per_class_bce":
        raise ParameterError(f"unknown loss kind {kind!r}")
    sc = np.clip(s, _CLAMP, 1.0 - _CLAMP)
    inside = (s > _CLAMP) & (s < 1.0 - _CLAMP)
    dl_ds = np.where(inside, (-t / sc + (1.0 - t) / (1.0 - sc)), 0.0) * (t_avg ** 2 / c)
    # softmax Jacobian: dz_j = s_j * (g_j - sum_k g_k s_k)
    dz = s * (dl_ds - (dl_ds * s).sum(axis=1, keepdims=True))
    return dz / n


@dataclass
class BatchLog:
    batch: int
    t_avg: float
    loss: float
    entropy_before: float
    entropy_after: float


@dataclass
class CDResult:
    student: Network
    log: list[BatchLog] = field(default_factory=list)

    def log_csv(self) -> str:
        return adaptation_log_csv(self.log)


def adaptation_log_csv(log) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["batch", "t_avg", "loss", "entropy_before", "entropy_after"])
    for r in log:
        w.writerow([r.batch, repr(r.t_avg), repr(r.loss), repr(r.entropy_before), repr(r.entropy_after)])
    return buf.getvalue()


def cd_step(teacher: Network, student: Network, batch, stats: SourceStats, config: CDConfig) -> BatchLog:
    """One distillation update of ``student`` on ``batch`` (in place)."""
    teacher_logits = teacher.forward(batch)
    tau = compute_tau(teacher_logits, stats, config)
    t_avg = tau.t_avg
    teacher_probs = softmax_temp(teacher_logits, tau.tau[:, None])
    student_logits = student.forward(batch)
    student_probs = softmax_temp(student_logits, 1.0)
    loss = cd_loss(student_probs, teacher_probs, t_avg, config.loss)
    grad = cd_loss_grad(student_probs, teacher_probs, t_avg, config.loss)
    before = float(np.mean(metrics.entropy_bits(student_probs)))
    if config.lr > 0 and not all(student.freeze_mask):
        sgd_step(student, student.backward(batch, grad), config.lr)
    after = float(np.mean(metrics.entropy_bits(softmax_temp(student.forward(batch), t_avg))))
    return BatchLog(-1, t_avg, loss, before, after)


def cd_adapt(teacher: Network, student: Network, observations, stats: SourceStats,
             config: CDConfig | None = None) -> CDResult:
    """Adapt ``student`` to unlabeled ``observations`` by certainty distillation.

    Observations are consumed in the given order, ``config.batch_size`` at a
    time. The student is modified in place and returned inside the result; the
    teacher is only read. After the last pass the student is temperature-scaled
    with the last batch's mean tau.
    """
    config = config or CDConfig()
    x = np.asarray(observations, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise InputError("observations must be a non-empty 2-D feature matrix")
    if not stats.kappa > 0:
        raise ParameterError("kappa must be positive")

    # Private copy: the caller's teacher may be shared between runs.
    teacher = teacher.copy()
    teacher.bn_mode = config.bn_mode
    student.bn_mode = config.bn_mode
    freeze_b_layers(student, config.beta)

    log: list[BatchLog] = []
    for epoch in range(config.epochs):
        for batch in _batches(x, config.batch_size):
            entry = cd_step(teacher, student, batch, stats, config)
            entry.batch = len(log)
            log.append(entry)
        if config.refresh_teacher and epoch + 1 < config.epochs:
            _copy_params(student, teacher)
    temperature_scale(student, log[-1].t_avg)
    return CDResult(student, log)


def _copy_params(src: Network, dst: Network) -> None:
    for a, b in zip(src.layers, dst.layers):
        for name in a.params:
            b.params[name] = a.params[name].copy()


__all__ = [
    "BATCH_STATS", "CDConfig", "CDResult", "SourceStats", "TauVector", "cd_adapt", "cd_loss",
    "cd_loss_grad", "cd_loss_terms", "compute_source_stats", "compute_tau", "stats_from_logits",
]
