"""Strategy forward/prediction contracts.

Four ways to turn a batch of aligned multimodal images into a prediction:
  * early   - one network on the channel-concatenated input, one head;
  * late    - one network per modality, probabilities averaged;
  * mimo    - one network on the concatenated input, one head per modality,
              probabilities averaged at test time;
  * single  - one network on one modality (the late-fusion building block).

Averaging always happens in probability space; argmax ties break to the
lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MimoBatch
from .losses import softmax

PROB_TOL = 1e-6


@dataclass(frozen=True)
class LogitsBundle:
    """Raw per-head logits for one forward pass, shape (B, n_heads, K)."""

    logits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.logits)
        if arr.ndim != 3:
            raise ValueError(f"logits must be (B, n_heads, K), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("logits contain non-finite values")
        object.__setattr__(self, "logits", arr)

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]

    @property
    def n_heads(self) -> int:
        return self.logits.shape[1]

    @property
    def n_classes(self) -> int:
        return self.logits.shape[2]

    def probs(self) -> np.ndarray:
        """Per-head softmax probabilities, shape (B, n_heads, K)."""
        return softmax(self.logits, axis=-1)

    def head(self, m: int) -> np.ndarray:
        return self.logits[:, m, :]


@dataclass(frozen=True)
class FusionPrediction:
    """Final per-item class distribution plus the strategy that produced it."""

    probs: np.ndarray
    source: str

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise ValueError("probs must be (B, K)")
        if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max() > PROB_TOL:
            raise ValueError("probs rows must be nonnegative and sum to 1")
        object.__setattr__(self, "probs", p)

    @property
    def predicted(self) -> np.ndarray:
        """Argmax class per item, ties to the lowest index."""
        return self.probs.argmax(axis=1)


def _head_view(model, batch: MimoBatch, n_heads: int) -> LogitsBundle:
    out = model.forward(batch.concat_input)
    b = out.shape[0]
    if out.shape[1] % n_heads:
        raise ValueError(f"model output width {out.shape[1]} not divisible into {n_heads} heads")
    return LogitsBundle(out.reshape(b, n_heads, out.shape[1] // n_heads))


def forward_early(model, batch: MimoBatch) -> LogitsBundle:
    """Single-head logits of the early-fusion network on an aligned batch."""
    if not batch.aligned:
        raise ValueError("early fusion evaluates aligned batches only")
    if model.head_plan.n_heads != 1:
        raise ValueError("early fusion model must have exactly one head")
    return _head_view(model, batch, 1)


def forward_late(models, batch: MimoBatch) -> tuple[list[LogitsBundle], FusionPrediction]:
    """Per-modality logits plus the averaged probability prediction."""
    if not batch.aligned:
        raise ValueError("late fusion evaluates aligned batches only")
    m = batch.n_modalities
    if len(models) != m:
        raise ValueError(f"need one model per modality: have {len(models)}, want {m}")
    bundles = []
    for i, model in enumerate(models):
        out = model.forward(batch.slot_images(i))
        bundles.append(LogitsBundle(out[:, None, :]))
    stacked = np.stack([b.probs()[:, 0, :] for b in bundles], axis=0)
    return bundles, FusionPrediction(probs=stacked.mean(axis=0), source="late")


def forward_mimo(model, batch: MimoBatch) -> LogitsBundle:
    """Per-head logits of the multi-head network; head m reads output block m."""
    m = batch.n_modalities
    if model.head_plan.n_heads != m:
        raise ValueError(f"model has {model.head_plan.n_heads} heads, batch has {m} slots")
    return _head_view(model, batch, m)


def predict_mimo(model, batch: MimoBatch) -> FusionPrediction:
    """Test-time prediction: softmax each head, average, argmax."""
    if not batch.aligned:
        raise ValueError("prediction requires an aligned batch (same specimen in all slots)")
    bundle = forward_mimo(model, batch)
    return FusionPrediction(probs=bundle.probs().mean(axis=1), source="mimo")


def average_probs(prob_sets) -> np.ndarray:
    """Arithmetic mean of a sequence of (B, K) probability arrays."""
    return np.mean(np.stack(list(prob_sets), axis=0), axis=0)
