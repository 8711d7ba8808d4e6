"""Distillation losses with analytic gradients with respect to student logits.

Every loss accepts a single sample (``z`` of shape ``(M,)``) or a batch
(``(B, M)``).  ``LossResult.value`` is the batch mean and
``LossResult.grad_logits`` holds, row by row, the derivative of each sample's
own loss, which is what :func:`mrkd.nn.backward` expects.

Teachers (snapshot logits, the uniform distribution, corrected targets) are
constants: no gradient flows into them.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, xlogy

METHODS = ("CE", "LSR", "KD", "LsrKD", "LsrKD-TC", "MrKD", "MrKD-TC")
TC_METHODS = ("LsrKD-TC", "MrKD-TC")
SNAPSHOT_METHODS = ("MrKD", "MrKD-TC")

# log arguments are clamped here for one-hot and degenerate distributions
PROB_FLOOR = 1e-12

# per-method (alpha, tau) defaults from the hyperparameter study
DEFAULTS = {
    "CE": (0.0, 1.0),
    "LSR": (0.1, 1.0),
    "KD": (0.25, 3.0),
    "LsrKD": (0.1, 3.0),
    "LsrKD-TC": (0.1, 3.0),
    "MrKD": (0.25, 3.0),
    "MrKD-TC": (0.25, 3.0),
}


class LossConfigError(ValueError):
    """Invalid method/hyperparameter combination."""


@dataclass(frozen=True)
class LossConfig:
    method: str = "CE"
    alpha: float = 0.0
    tau: float = 1.0
    gamma: float | None = None
    num_classes: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise LossConfigError(f"method: unknown loss method {self.method!r}; expected one of {METHODS}")
        if not 0.0 <= self.alpha <= 1.0:
            raise LossConfigError(f"alpha: must lie in [0, 1], got {self.alpha}")
        if not self.tau > 0.0:
            raise LossConfigError(f"tau: must be positive, got {self.tau}")
        if self.num_classes is not None and self.num_classes < 2:
            raise LossConfigError(f"num_classes: need at least 2 classes, got {self.num_classes}")
        if self.method in TC_METHODS:
            if self.gamma is None:
                raise LossConfigError(f"gamma: required for {self.method}")
            if not 0.0 < self.gamma < 1.0:
                raise LossConfigError(f"gamma: must lie in (0, 1), got {self.gamma}")
            # gamma == 1/M is allowed: it is the uniform-teacher reduction
            if self.num_classes is not None and self.gamma < 1.0 / self.num_classes:
                raise LossConfigError(
                    f"gamma: {self.gamma} is below 1/M = {1.0 / self.num_classes}; "
                    "the corrected teacher must favour the true class")
        elif self.gamma is not None:
            raise LossConfigError(f"gamma: only meaningful for {TC_METHODS}, not {self.method}")

    @classmethod
    def defaults(cls, method: str, num_classes: int | None = None, **overrides) -> "LossConfig":
        if method not in DEFAULTS:
            raise LossConfigError(f"method: unknown loss method {method!r}")
        alpha, tau = DEFAULTS[method]
        cfg = dict(method=method, alpha=alpha, tau=tau, num_classes=num_classes)
        cfg.update(overrides)
        return cls(**cfg)

    def with_(self, **changes) -> "LossConfig":
        return replace(self, **changes)

    @property
    def uses_snapshots(self) -> bool:
        return self.method in SNAPSHOT_METHODS


@dataclass
class LossResult:
    value: float
    grad_logits: np.ndarray
    per_sample: np.ndarray | None = None


def _check_method(cfg: LossConfig, *allowed: str) -> None:
    if cfg.method not in allowed:
        raise LossConfigError(f"method: expected {' or '.join(allowed)}, got {cfg.method}")


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    out = np.zeros(labels.shape + (num_classes,))
    np.put_along_axis(out, labels[..., None].astype(np.intp), 1.0, axis=-1)
    return out


def log_softmax_t(z, tau: float = 1.0) -> np.ndarray:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    s = np.asarray(z, dtype=np.float64) / tau
    return s - logsumexp(s, axis=-1, keepdims=True)


def softmax_t(z, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax along the last axis, stabilised by max subtraction."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    s = np.asarray(z, dtype=np.float64) / tau
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"distribution lengths differ: {a.shape[-1]} vs {b.shape[-1]}")


def cross_entropy(p, q):
    """``-sum p log q`` per row; scalar for 1-D inputs."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_pair(p, q)
    return -(p * np.log(np.maximum(q, PROB_FLOOR))).sum(axis=-1)


def kl_div(qhat, q):
    """``KL(qhat || q)`` per row, floored at zero against rounding."""
    qhat = np.asarray(qhat, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_pair(qhat, q)
    terms = xlogy(qhat, qhat) - qhat * np.log(np.maximum(q, PROB_FLOOR))
    return np.maximum(terms.sum(axis=-1), 0.0)


def _as_batch(p, z):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None, :] if single else z
    if z2.ndim != 2 or z2.shape[1] < 2:
        raise ValueError(f"logits must have shape (M,) or (B, M) with M >= 2, got {z.shape}")
    p = np.asarray(p)
    if p.shape == z.shape[:-1] and np.issubdtype(p.dtype, np.integer):
        p = one_hot(p, z2.shape[1])
    p = np.asarray(p, dtype=np.float64)
    p2 = p[None, :] if p.ndim == 1 else p
    if p2.shape != z2.shape:
        raise ValueError(f"target shape {p.shape} does not match logits {z.shape}")
    return p2, z2, single


def _finish(per_sample: np.ndarray, grad: np.ndarray, single: bool) -> LossResult:
    if single:
        return LossResult(float(per_sample[0]), grad[0], per_sample)
    return LossResult(float(per_sample.mean()), grad, per_sample)


def _distill(p, z, teachers, alpha: float, tau: float, scale: float):
    """``(1-alpha) CE(p, q(1)) + alpha * scale * mean_i KL(t_i || q(tau))``.

    ``teachers`` has shape ``(n, B, M)`` or is ``None`` for plain CE.
    """
    log_q1 = log_softmax_t(z, 1.0)
    value = (1.0 - alpha) * -(p * log_q1).sum(axis=-1)
    grad = (1.0 - alpha) * (np.exp(log_q1) - p)
    if teachers is not None:
        log_qt = log_softmax_t(z, tau)
        kl = (xlogy(teachers, teachers) - teachers * log_qt).sum(axis=-1).mean(axis=0)
        value = value + alpha * scale * kl
        grad = grad + (alpha * scale / tau) * (np.exp(log_qt) - teachers.mean(axis=0))
    return value, grad


def loss_ce(p, z) -> LossResult:
    p2, z2, single = _as_batch(p, z)
    return _finish(*_distill(p2, z2, None, 0.0, 1.0, 0.0), single)


def loss_kd(p, z, zhat, cfg: LossConfig) -> LossResult:
    """Classic distillation from a fixed teacher, KL term scaled by tau**2."""
    _check_method(cfg, "KD")
    p2, z2, single = _as_batch(p, z)
    zh = np.asarray(zhat, dtype=np.float64).reshape(z2.shape)
    teacher = softmax_t(zh, cfg.tau)[None]
    return _finish(*_distill(p2, z2, teacher, cfg.alpha, cfg.tau, cfg.tau ** 2), single)


def loss_lsr(p, z, alpha: float) -> LossResult:
    """Label smoothing: cross-entropy against ``(1-alpha) p + alpha u``."""
    if not 0.0 <= alpha <= 1.0:
        raise LossConfigError(f"alpha: must lie in [0, 1], got {alpha}")
    p2, z2, single = _as_batch(p, z)
    m = z2.shape[1]
    smoothed = (1.0 - alpha) * p2 + alpha / m
    log_q1 = log_softmax_t(z2, 1.0)
    per_sample = -(smoothed * log_q1).sum(axis=-1)
    return _finish(per_sample, np.exp(log_q1) - smoothed, single)


def lsr_decomposition(p, z, alpha: float) -> tuple[float, float]:
    """The two readings of label smoothing as ``(smoothed CE, (1-a) CE + a KL(u||q))``.

    They differ by the entropy of the uniform distribution times alpha.
    """
    p2, z2, _ = _as_batch(p, z)
    m = z2.shape[1]
    q1 = softmax_t(z2, 1.0)
    smoothed = cross_entropy((1.0 - alpha) * p2 + alpha / m, q1)
    kd_form = (1.0 - alpha) * cross_entropy(p2, q1) + alpha * kl_div(np.full_like(q1, 1.0 / m), q1)
    return float(smoothed.mean()), float(kd_form.mean())


def loss_lsrkd(p, z, cfg: LossConfig) -> LossResult:
    """Uniform teacher at temperature tau, KL term scaled by tau (not tau**2)."""
    _check_method(cfg, "LsrKD")
    p2, z2, single = _as_batch(p, z)
    u = np.full((1,) + z2.shape, 1.0 / z2.shape[1])
    return _finish(*_distill(p2, z2, u, cfg.alpha, cfg.tau, cfg.tau), single)


def kl_grad_uniform(z, tau: float) -> np.ndarray:
    """Derivative of ``KL(u || q(tau))`` with respect to the logits."""
    z = np.asarray(z, dtype=np.float64)
    return (softmax_t(z, tau) - 1.0 / z.shape[-1]) / tau


def high_temperature_gradient(z, tau: float) -> np.ndarray:
    """First-order approximation ``z / (M tau^2)`` of :func:`kl_grad_uniform`.

    Only valid for zero-mean logits that are small compared with ``tau``.
    """
    z = np.asarray(z, dtype=np.float64)
    return z / (z.shape[-1] * tau ** 2)


def teacher_correct_uniform(c, gamma: float, num_classes: int) -> np.ndarray:
    """Handcrafted teacher: ``gamma`` on class ``c``, the rest spread evenly."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    c = np.asarray(c)
    if np.any(c < 0) or np.any(c >= num_classes):
        raise ValueError(f"class index out of range [0, {num_classes})")
    if gamma == 1.0 / num_classes:
        return np.full(c.shape + (num_classes,), 1.0 / num_classes)
    out = np.full(c.shape + (num_classes,), (1.0 - gamma) / (num_classes - 1))
    np.put_along_axis(out, c[..., None].astype(np.intp), gamma, axis=-1)
    return out


def teacher_correct_output(qhat, c, gamma: float) -> np.ndarray:
    """Force ``gamma`` onto class ``c`` and rescale the other classes proportionally.

    Rows where the teacher already puts (numerically) all its mass on ``c``
    have nothing to rescale and fall back to :func:`teacher_correct_uniform`.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    qhat = np.asarray(qhat, dtype=np.float64)
    m = qhat.shape[-1]
    c = np.asarray(c)
    if np.any(c < 0) or np.any(c >= m):
        raise ValueError(f"class index out of range [0, {m})")
    idx = np.broadcast_to(c, qhat.shape[:-1])[..., None].astype(np.intp)
    qc = np.take_along_axis(qhat, idx, axis=-1)
    rest = 1.0 - qc
    degenerate = rest <= 1e-12
    out = (1.0 - gamma) * qhat / np.where(degenerate, 1.0, rest)
    np.put_along_axis(out, idx, gamma, axis=-1)
    if np.any(degenerate):
        fallback = teacher_correct_uniform(idx[..., 0], gamma, m)
        out = np.where(degenerate, fallback, out)
    return out


def loss_lsrkd_tc(p, z, cfg: LossConfig) -> LossResult:
    _check_method(cfg, "LsrKD-TC")
    p2, z2, single = _as_batch(p, z)
    teacher = teacher_correct_uniform(p2.argmax(axis=-1), cfg.gamma, z2.shape[1])[None]
    return _finish(*_distill(p2, z2, teacher, cfg.alpha, cfg.tau, cfg.tau), single)


def _stack_teachers(zhats: Sequence, shape: tuple[int, ...]) -> np.ndarray:
    if len(zhats) == 0:
        raise ValueError("at least one teacher is required")
    return np.stack([np.asarray(zh, dtype=np.float64).reshape(shape) for zh in zhats])


def loss_mrkd(p, z, zhats: Sequence, cfg: LossConfig) -> LossResult:
    """Distillation from ``n`` snapshot teachers; KL averaged over them, scaled by tau**2."""
    _check_method(cfg, "MrKD")
    p2, z2, single = _as_batch(p, z)
    teachers = softmax_t(_stack_teachers(zhats, z2.shape), cfg.tau)
    return _finish(*_distill(p2, z2, teachers, cfg.alpha, cfg.tau, cfg.tau ** 2), single)


def loss_mrkd_tc(p, z, zhats: Sequence, cfg: LossConfig) -> LossResult:
    """Snapshot teachers passed through :func:`teacher_correct_output`; KL scaled by tau."""
    _check_method(cfg, "MrKD-TC")
    p2, z2, single = _as_batch(p, z)
    teachers = softmax_t(_stack_teachers(zhats, z2.shape), cfg.tau)
    teachers = teacher_correct_output(teachers, p2.argmax(axis=-1), cfg.gamma)
    return _finish(*_distill(p2, z2, teachers, cfg.alpha, cfg.tau, cfg.tau), single)


def compute_loss(cfg: LossConfig, p, z, teacher_logits=None) -> LossResult:
    """Dispatch on ``cfg.method``.

    ``teacher_logits`` is one logit array for KD and a list of arrays for the
    snapshot methods; other methods ignore it.
    """
    method = cfg.method
    if method == "CE":
        return loss_ce(p, z)
    if method == "LSR":
        return loss_lsr(p, z, cfg.alpha)
    if method == "KD":
        if teacher_logits is None:
            raise ValueError("KD needs teacher logits")
        return loss_kd(p, z, teacher_logits, cfg)
    if method == "LsrKD":
        return loss_lsrkd(p, z, cfg)
    if method == "LsrKD-TC":
        return loss_lsrkd_tc(p, z, cfg)
    if teacher_logits is None:
        raise ValueError(f"{method} needs snapshot teacher logits")
    if method == "MrKD":
        return loss_mrkd(p, z, teacher_logits, cfg)
    return loss_mrkd_tc(p, z, teacher_logits, cfg)
