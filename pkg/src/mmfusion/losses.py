"""Loss formulation for multi-head training with optional distillation.

The hard-label term is the sum over modality heads of the standard
cross-entropy (mean over the batch per head). The distillation term is the
sum over heads of the KL divergence from the teacher's temperature-softened
distribution to the student's, teacher first and treated as a constant.
The combined objective is

    l_total = l_m + T^2 * l_kd

where the T^2 factor compensates the 1/T^2 gradient scaling introduced by
the temperature-softened softmax. All computation is float64 regardless of
input dtype; gradients returned to the training loop are cast there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_TEMPERATURE = 4.0


@dataclass(frozen=True)
class Temperature:
    """Softmax temperature; higher values flatten the distribution."""

    value: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError(f"temperature must be > 0, got {self.value}")


def _tval(t) -> float:
    return t.value if isinstance(t, Temperature) else float(Temperature(float(t)).value)


@dataclass(frozen=True)
class KdResult:
    """Distillation loss with the temperature it was computed at."""

    value: float
    per_head: np.ndarray
    temperature: float


@dataclass(frozen=True)
class LossBreakdown:
    l_m: float
    l_kd: float
    l_total: float
    per_head_ce: np.ndarray
    per_head_kl: np.ndarray
    temperature: float

    def to_record(self, step: int) -> dict:
        return {
            "step": int(step),
            "l_m": float(self.l_m),
            "l_kd": float(self.l_kd),
            "l_total": float(self.l_total),
            "T": float(self.temperature),
        }


def _as_logits(x) -> np.ndarray:
    arr = x.logits if hasattr(x, "logits") else x
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"expected logits (B, n_heads, K), got shape {arr.shape}")
    return arr


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(z, axis=axis))


def soft_targets(z: np.ndarray, T=DEFAULT_TEMPERATURE) -> np.ndarray:
    """Temperature-softened class distribution from logits (max-subtracted)."""
    return softmax(np.asarray(z, dtype=np.float64) / _tval(T), axis=-1)


def cross_entropy_sum(logits, labels) -> tuple[float, np.ndarray]:
    """Sum over heads of per-head mean cross-entropy.

    logits: (B, M, K) or LogitsBundle; labels: (M, B) integer class indices.
    Returns (l_m, per-head terms of shape (M,)).
    """
    z = _as_logits(logits)
    b, m, k = z.shape
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (m, b):
        raise ValueError(f"labels shape {y.shape} != (n_heads={m}, batch={b})")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError("label out of range")
    logp = log_softmax(z, axis=-1)
    picked = np.take_along_axis(logp, y.T[:, :, None], axis=2)[:, :, 0]  # (B, M)
    per_head = -picked.mean(axis=0)
    return float(per_head.sum()), per_head


def cross_entropy_grad(logits, labels) -> np.ndarray:
    """d l_m / d logits, shape (B, M, K)."""
    z = _as_logits(logits)
    b, m, k = z.shape
    y = np.asarray(labels, dtype=np.int64)
    g = softmax(z, axis=-1)
    g[np.arange(b)[:, None], np.arange(m)[None, :], y.T] -= 1.0
    return g / b


def kl_to_targets(student_logits, target_probs: np.ndarray, T=DEFAULT_TEMPERATURE) -> KdResult:
    """KL(targets || student soft targets), mean over batch, summed over heads."""
    t = _tval(T)
    z = _as_logits(student_logits)
    q = np.asarray(target_probs, dtype=np.float64)
    if q.shape != z.shape:
        raise ValueError(f"target probs shape {q.shape} != student logits shape {z.shape}")
    logp = log_softmax(z / t, axis=-1)
    logq = np.where(q > 0, np.log(np.where(q > 0, q, 1.0)), 0.0)
    per_sample = (q * (logq - logp)).sum(axis=-1)  # (B, M)
    per_head = per_sample.mean(axis=0)
    return KdResult(value=float(per_head.sum()), per_head=per_head, temperature=t)


def kd_loss(student_logits, teacher_logits, T=DEFAULT_TEMPERATURE) -> KdResult:
    """Distillation loss between per-head student and teacher logits (teacher fixed)."""
    t = _tval(T)
    return kl_to_targets(student_logits, soft_targets(_as_logits(teacher_logits), t), t)


def kd_grad_to_targets(student_logits, target_probs: np.ndarray, T=DEFAULT_TEMPERATURE) -> np.ndarray:
    """d l_kd / d student logits (without the T^2 factor), shape (B, M, K)."""
    t = _tval(T)
    z = _as_logits(student_logits)
    p = softmax(z / t, axis=-1)
    return (p - np.asarray(target_probs, dtype=np.float64)) / (t * z.shape[0])


def total_loss(l_m: float, l_kd, T=DEFAULT_TEMPERATURE) -> float:
    """Combine hard and soft terms: l_m + T^2 * l_kd."""
    t = _tval(T)
    if isinstance(l_kd, KdResult):
        if l_kd.temperature != t:
            raise ValueError(
                f"l_kd was computed at T={l_kd.temperature} but combined at T={t}"
            )
        l_kd = l_kd.value
    return float(l_m) + t * t * float(l_kd)


def loss_breakdown(student_logits, labels, target_probs=None, T=DEFAULT_TEMPERATURE) -> LossBreakdown:
    """Full loss record for one step; target_probs=None means no distillation."""
    t = _tval(T)
    l_m, per_head_ce = cross_entropy_sum(student_logits, labels)
    if target_probs is None:
        z = _as_logits(student_logits)
        per_head_kl = np.zeros(z.shape[1])
        kd = KdResult(0.0, per_head_kl, t)
    else:
        kd = kl_to_targets(student_logits, target_probs, t)
    return LossBreakdown(
        l_m=l_m,
        l_kd=kd.value,
        l_total=total_loss(l_m, kd, t),
        per_head_ce=per_head_ce,
        per_head_kl=kd.per_head,
        temperature=t,
    )


def total_grad(student_logits, labels, target_probs=None, T=DEFAULT_TEMPERATURE) -> np.ndarray:
    """d l_total / d student logits, shape (B, M, K)."""
    t = _tval(T)
    g = cross_entropy_grad(student_logits, labels)
    if target_probs is not None:
        g = g + (t * t) * kd_grad_to_targets(student_logits, target_probs, t)
    return g
