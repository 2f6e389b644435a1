"""Evaluation: weighted classification metrics, head-independence probe, complexity table.

"Weighted" throughout means support-weighted over classes (one-vs-rest for
specificity and AUC). All metrics are reported as percentages in [0, 100].
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbones import ComplexityReport
from .data import MultimodalDataset, aligned_batch_from_arrays
from .fusion import forward_mimo
from .losses import softmax

PROBE_BINS = 20


@dataclass(frozen=True)
class ConfusionMatrix:
    """K x K counts; rows are true classes, columns predicted classes."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != c.shape[1] or (c < 0).any():
            raise ValueError("confusion matrix must be square with nonnegative counts")
        object.__setattr__(self, "counts", c)

    @classmethod
    def from_predictions(cls, labels: np.ndarray, predicted: np.ndarray, n_classes: int) -> "ConfusionMatrix":
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (labels, predicted), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class MetricsReport:
    """Support-weighted F1 / sensitivity / specificity / AUC, as percentages."""

    weighted_f1: float
    weighted_sensitivity: float
    weighted_specificity: float
    weighted_auc: float
    confusion: ConfusionMatrix | None = None
    complexity: ComplexityReport | None = None

    def __post_init__(self):
        for name in ("weighted_f1", "weighted_sensitivity", "weighted_specificity", "weighted_auc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")

    def metric_dict(self) -> dict:
        return {
            "weighted_f1": self.weighted_f1,
            "weighted_sensitivity": self.weighted_sensitivity,
            "weighted_specificity": self.weighted_specificity,
            "weighted_auc": self.weighted_auc,
        }

    def to_dict(self) -> dict:
        d = self.metric_dict()
        if self.confusion is not None:
            d["confusion"] = self.confusion.counts.tolist()
        if self.complexity is not None:
            d["complexity"] = {
                "flops": self.complexity.flops,
                "params": self.complexity.params,
                "convention": self.complexity.convention,
            }
        return d


def _binary_roc_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Trapezoidal area under the ROC curve over all score thresholds."""
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined without both positives and negatives")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    pos = positive[order].astype(np.float64)
    tp = np.cumsum(pos)
    fp = np.cumsum(1.0 - pos)
    distinct = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=int)
    keep = np.r_[distinct, s.size - 1]
    tpr = np.r_[0.0, tp[keep] / n_pos]
    fpr = np.r_[0.0, fp[keep] / n_neg]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) * 0.5))


def compute_metrics(
    probs: np.ndarray,
    labels: np.ndarray,
    complexity: ComplexityReport | None = None,
    validate: bool = True,
) -> MetricsReport:
    """Metrics from per-item class distributions and true labels.

    Predictions are argmax with lowest-index tie-break; per-class one-vs-rest
    precision/recall/specificity come from the confusion matrix; AUC uses the
    per-class probability as the ranking score. Classes with zero support get
    zero weight.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ValueError("probs must be (N, K) matching labels (N,)")
    if probs.shape[0] == 0:
        raise ValueError("cannot compute metrics on an empty input")
    k = probs.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("label out of range")
    if validate and ((probs < 0).any() or np.abs(probs.sum(axis=1) - 1.0).max() > 1e-5):
        raise ValueError("probs rows must be valid distributions")

    predicted = probs.argmax(axis=1)
    confusion = ConfusionMatrix.from_predictions(labels, predicted, k)
    cm = confusion.counts.astype(np.float64)
    support = cm.sum(axis=1)
    total = cm.sum()
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = support - tp
    tn = total - tp - fp - fn

    recall = _safe_div(tp, tp + fn)
    precision = _safe_div(tp, tp + fp)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    specificity = _safe_div(tn, tn + fp)
    auc = np.zeros(k)
    for c in range(k):
        if support[c] and support[c] < total:
            auc[c] = _binary_roc_auc(probs[:, c], labels == c)

    w = support / support.sum()
    return MetricsReport(
        weighted_f1=float(100.0 * (w * f1).sum()),
        weighted_sensitivity=float(100.0 * (w * recall).sum()),
        weighted_specificity=float(100.0 * (w * specificity).sum()),
        weighted_auc=float(100.0 * (w * auc).sum()),
        confusion=confusion,
        complexity=complexity,
    )


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    mask = den > 0
    out[mask] = num[mask] / den[mask]
    return out


# -- subnetwork-independence probe ------------------------------------------------


@dataclass(frozen=True)
class ConfidenceProfile:
    """Per-head max-softmax confidence distribution over a probe set."""

    probe_mode: str
    head_means: np.ndarray  # (M,)
    histograms: np.ndarray  # (M, PROBE_BINS) counts
    bin_edges: np.ndarray  # (PROBE_BINS + 1,)
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "probe_mode": self.probe_mode,
            "head_means": self.head_means.tolist(),
            "histograms": self.histograms.tolist(),
            "bin_edges": self.bin_edges.tolist(),
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConfidenceProfile":
        return cls(
            probe_mode=d["probe_mode"],
            head_means=np.array(d["head_means"], dtype=np.float64),
            histograms=np.array(d["histograms"], dtype=np.int64),
            bin_edges=np.array(d["bin_edges"], dtype=np.float64),
            n_samples=int(d["n_samples"]),
        )


def probe_mode_name(mode, fill: str = "replicate") -> str:
    if mode == "all":
        return "all_modalities"
    name = f"single_modality_{int(mode)}"
    if fill == "zeros":
        name += "_zerofill"
    return name


def head_confidences(model, dataset: MultimodalDataset, mode, fill: str = "replicate",
                     batch_size: int = 256) -> np.ndarray:
    """Max-softmax confidence of every head on every probe item, shape (N, M).

    mode "all": aligned inputs, every slot holds its own modality.
    mode m (int): every slot holds the modality-m image of the same specimen
    ("replicate"), or other slots are zeroed ("zeros").
    """
    m = dataset.n_modalities
    if mode != "all" and not (isinstance(mode, (int, np.integer)) and 0 <= int(mode) < m):
        raise ValueError(f"invalid probe mode {mode!r}: use 'all' or a modality index")
    if fill not in ("replicate", "zeros"):
        raise ValueError(f"invalid fill {fill!r}: use 'replicate' or 'zeros'")
    confs = []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, min(start + batch_size, len(dataset)))
        imgs = dataset.images[sl]
        if mode != "all":
            chosen = imgs[:, int(mode) : int(mode) + 1]
            if fill == "replicate":
                imgs = np.repeat(chosen, m, axis=1)
            else:
                imgs = np.zeros_like(imgs)
                imgs[:, int(mode)] = chosen[:, 0]
        batch = aligned_batch_from_arrays(imgs, dataset.labels[sl])
        probs = softmax(forward_mimo(model, batch).logits, axis=-1)
        confs.append(probs.max(axis=-1))
    return np.concatenate(confs, axis=0)


def confidence_probe(model, dataset: MultimodalDataset, mode, fill: str = "replicate",
                     batch_size: int = 256) -> ConfidenceProfile:
    """Summarize head confidences into per-head means and histograms."""
    conf = head_confidences(model, dataset, mode, fill=fill, batch_size=batch_size)
    edges = np.linspace(0.0, 1.0, PROBE_BINS + 1)
    hists = np.stack([np.histogram(conf[:, h], bins=edges)[0] for h in range(conf.shape[1])])
    return ConfidenceProfile(
        probe_mode=probe_mode_name(mode, fill),
        head_means=conf.mean(axis=0),
        histograms=hists,
        bin_edges=edges,
        n_samples=conf.shape[0],
    )


def plot_confidence_profile(profile: ConfidenceProfile, path) -> None:
    """One histogram panel per head, written as a PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    m = profile.head_means.shape[0]
    fig, axes = plt.subplots(1, m, figsize=(3.2 * m, 2.8), sharey=True)
    centers = 0.5 * (profile.bin_edges[:-1] + profile.bin_edges[1:])
    width = profile.bin_edges[1] - profile.bin_edges[0]
    for h, ax in enumerate(np.atleast_1d(axes)):
        ax.bar(centers, profile.histograms[h], width=width * 0.9)
        ax.set_title(f"head {h} (mean {profile.head_means[h]:.2f})", fontsize=9)
        ax.set_xlabel("max softmax confidence", fontsize=8)
        ax.set_xlim(0, 1)
    fig.suptitle(f"input: {profile.probe_mode}", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# -- complexity / aggregate reporting ----------------------------------------------


def complexity_table(entries: list[dict]) -> list[dict]:
    """Normalize (method, complexity, optional metrics) entries into report rows."""
    rows = []
    for e in entries:
        row = {"method": e["method"]}
        if e.get("metrics") is not None:
            row.update(e["metrics"])
        comp: ComplexityReport = e["complexity"]
        row["flops"] = comp.flops
        row["params"] = comp.params
        rows.append(row)
    return rows


def render_csv(rows: list[dict]) -> str:
    import csv
    import io

    keys = list(dict.fromkeys(k for r in rows for k in r))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=keys)
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def render_markdown(rows: list[dict]) -> str:
    keys = list(dict.fromkeys(k for r in rows for k in r))
    lines = ["| " + " | ".join(keys) + " |", "|" + "---|" * len(keys)]
    for r in rows:
        lines.append("| " + " | ".join(str(r.get(k, "")) for k in keys) + " |")
    return "\n".join(lines) + "\n"


def write_metrics_json(report: MetricsReport, out_dir, run_id: str) -> Path:
    """Emit eval/<run-id>/metrics.json under out_dir."""
    target = Path(out_dir) / "eval" / run_id
    target.mkdir(parents=True, exist_ok=True)
    path = target / "metrics.json"
    path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    return path
