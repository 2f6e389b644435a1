"""Multimodal dataset abstraction, synthetic surrogate generator, batching, k-fold.

A dataset holds, for every specimen, one aligned image per modality plus a
single class label. The synthetic generator encodes the class of each
modality image as a fixed low-frequency template per (modality, class) pair,
optionally corrupted: with probability `informativeness[m]` the template of
the true class is used, otherwise the template of a uniformly random class.

Datasets are immutable after construction and safe to read concurrently;
every batching operation is deterministic given an explicit seed or
Generator.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RATIO_TOL = 1e-9
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class ModalitySpec:
    """Shape contract for one modality's images (square, channels-first)."""

    modality_id: int
    channels_per_modality: int = 3
    image_side: int = 32

    def __post_init__(self):
        if self.modality_id < 0:
            raise ValueError("modality_id must be >= 0")
        if self.channels_per_modality < 1 or self.image_side < 1:
            raise ValueError("channels_per_modality and image_side must be positive")


@dataclass(frozen=True)
class MultimodalSample:
    """One specimen: M aligned per-modality images plus a single label."""

    images: tuple[np.ndarray, ...]
    label: int
    specimen_id: str

    def __post_init__(self):
        if len(self.images) < 2:
            raise ValueError("a multimodal sample needs at least 2 modalities")
        shape = self.images[0].shape
        if any(img.shape != shape for img in self.images):
            raise ValueError("all modality images must share one shape")


@dataclass(frozen=True)
class DatasetManifest:
    class_names: tuple[str, ...]
    class_counts: tuple[int, ...]
    modality_specs: tuple[ModalitySpec, ...]
    sample_index: tuple[tuple[str, int], ...]  # (specimen_id, label)

    def __post_init__(self):
        if len(self.class_names) != len(self.class_counts):
            raise ValueError("class_names and class_counts length mismatch")
        if sum(self.class_counts) != len(self.sample_index):
            raise ValueError("class_counts must sum to the number of samples")
        if len(self.modality_specs) < 2:
            raise ValueError("need at least 2 modalities")
        ref = self.modality_specs[0]
        for m, spec in enumerate(self.modality_specs):
            if spec.modality_id != m:
                raise ValueError("modality_specs must be indexed 0..M-1 in order")
            if (
                spec.channels_per_modality != ref.channels_per_modality
                or spec.image_side != ref.image_side
            ):
                raise ValueError("all modalities must share channels and image side")

    @property
    def n_modalities(self) -> int:
        return len(self.modality_specs)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


class MultimodalDataset:
    """In-memory dataset: images (N, M, C, S, S) float32 in [0,1], labels (N,)."""

    def __init__(
        self,
        manifest: DatasetManifest,
        images: np.ndarray,
        labels: np.ndarray,
        templates: np.ndarray | None = None,
    ):
        n = len(manifest.sample_index)
        m = manifest.n_modalities
        spec = manifest.modality_specs[0]
        expected = (n, m, spec.channels_per_modality, spec.image_side, spec.image_side)
        if images.shape != expected:
            raise ValueError(f"images shape {images.shape} != {expected}")
        if labels.shape != (n,):
            raise ValueError("labels must be one per sample")
        if labels.size and (labels.min() < 0 or labels.max() >= manifest.n_classes):
            raise ValueError("label out of range")
        self.manifest = manifest
        self.images = images
        self.labels = labels.astype(np.int64)
        self.templates = templates
        self.images.flags.writeable = False
        self.labels.flags.writeable = False

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def n_modalities(self) -> int:
        return self.manifest.n_modalities

    @property
    def n_classes(self) -> int:
        return self.manifest.n_classes

    @property
    def channels_per_modality(self) -> int:
        return self.manifest.modality_specs[0].channels_per_modality

    @property
    def image_side(self) -> int:
        return self.manifest.modality_specs[0].image_side

    @property
    def specimen_ids(self) -> tuple[str, ...]:
        return tuple(sid for sid, _ in self.manifest.sample_index)

    def sample(self, i: int) -> MultimodalSample:
        sid, label = self.manifest.sample_index[i]
        return MultimodalSample(
            images=tuple(self.images[i, m] for m in range(self.n_modalities)),
            label=int(label),
            specimen_id=sid,
        )

    def modality_images(self, m: int) -> np.ndarray:
        """All images of modality m, shape (N, C, S, S)."""
        if not 0 <= m < self.n_modalities:
            raise ValueError(f"modality {m} out of range 0..{self.n_modalities - 1}")
        return self.images[:, m]

    def subset(self, indices) -> "MultimodalDataset":
        indices = np.asarray(indices, dtype=np.int64)
        labels = self.labels[indices]
        counts = np.bincount(labels, minlength=self.n_classes)
        manifest = DatasetManifest(
            class_names=self.manifest.class_names,
            class_counts=tuple(int(c) for c in counts),
            modality_specs=self.manifest.modality_specs,
            sample_index=tuple(self.manifest.sample_index[i] for i in indices),
        )
        return MultimodalDataset(manifest, self.images[indices].copy(), labels.copy(), self.templates)


@dataclass(frozen=True)
class MimoBatch:
    """Channel-concatenated batch with one label vector per modality slot.

    `aligned` marks the test-time protocol (all slots hold the same
    specimen); training batches for the multi-head network are unaligned.
    """

    concat_input: np.ndarray  # (B, M*C, S, S)
    labels: np.ndarray  # (M, B)
    aligned: bool

    def __post_init__(self):
        if self.concat_input.ndim != 4 or self.labels.ndim != 2:
            raise ValueError("concat_input must be 4-D and labels 2-D")
        m, b = self.labels.shape
        if self.concat_input.shape[0] != b:
            raise ValueError("batch size mismatch between input and labels")
        if m < 2 or self.concat_input.shape[1] % m:
            raise ValueError("channel count must be M * channels_per_modality with M >= 2")
        if self.aligned and not (self.labels == self.labels[0]).all():
            raise ValueError("aligned batch requires identical label vectors across slots")

    @property
    def batch_size(self) -> int:
        return self.concat_input.shape[0]

    @property
    def n_modalities(self) -> int:
        return self.labels.shape[0]

    def slot_images(self, m: int) -> np.ndarray:
        """Channels of modality slot m, shape (B, C, S, S)."""
        c = self.concat_input.shape[1] // self.n_modalities
        return self.concat_input[:, m * c : (m + 1) * c]


@dataclass(frozen=True)
class FoldPlan:
    """Cross-validation assignment: fold index per sample."""

    n_folds: int
    assignments: np.ndarray

    def __post_init__(self):
        if self.n_folds < 2:
            raise ValueError("n_folds must be >= 2")
        a = np.asarray(self.assignments, dtype=np.int64)
        if a.ndim != 1 or (a.size and (a.min() < 0 or a.max() >= self.n_folds)):
            raise ValueError("assignments must be fold indices in 0..n_folds-1")
        object.__setattr__(self, "assignments", a)
        a.flags.writeable = False

    def val_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)


# -- synthetic surrogate generator --------------------------------------------


def largest_remainder_counts(n_samples: int, ratios) -> np.ndarray:
    """Round n_samples * ratios to integers that sum exactly to n_samples."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if abs(ratios.sum() - 1.0) > RATIO_TOL:
        raise ValueError(f"class ratios must sum to 1 (got {ratios.sum()!r})")
    if (ratios < 0).any():
        raise ValueError("class ratios must be nonnegative")
    shares = ratios * n_samples
    counts = np.floor(shares).astype(np.int64)
    remainder = shares - counts
    deficit = n_samples - int(counts.sum())
    order = np.argsort(-remainder, kind="stable")  # ties resolved to lower class index
    counts[order[:deficit]] += 1
    return counts


def _bilinear_resize(img: np.ndarray, side: int) -> np.ndarray:
    """Upsample (..., h, w) -> (..., side, side) with bilinear interpolation."""
    h, w = img.shape[-2:]
    ys = np.linspace(0, h - 1, side)
    xs = np.linspace(0, w - 1, side)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = img[..., y0[:, None], x0[None, :]]
    b = img[..., y0[:, None], x0[None, :] + 1]
    c = img[..., y0[:, None] + 1, x0[None, :]]
    d = img[..., y0[:, None] + 1, x0[None, :] + 1]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def make_templates(
    n_modalities: int, n_classes: int, channels: int, side: int, rng: np.random.Generator
) -> np.ndarray:
    """Fixed low-frequency random pattern per (modality, class), values in [0.05, 0.95]."""
    grid = max(2, side // 8)
    coarse = rng.uniform(0.0, 1.0, size=(n_modalities, n_classes, channels, grid, grid))
    smooth = _bilinear_resize(coarse, side)
    return (0.05 + 0.9 * smooth).astype(np.float32)


def generate_synthetic_dataset(
    n_samples: int,
    class_ratios,
    spec: ModalitySpec,
    modality_informativeness,
    seed: int,
    noise_std: float = 0.05,
    class_names: tuple[str, ...] | None = None,
) -> MultimodalDataset:
    """Build a deterministic surrogate dataset with the requested imbalance profile.

    Every pixel is a function of (seed, params). Images are quantized to
    uint8 levels so that writing to disk and reading back is lossless.
    """
    informativeness = np.asarray(modality_informativeness, dtype=np.float64)
    if ((informativeness < 0) | (informativeness > 1)).any():
        raise ValueError("informativeness values must lie in [0, 1]")
    n_modalities = informativeness.size
    if n_modalities < 2:
        raise ValueError("need at least 2 modalities")
    n_classes = len(class_ratios)
    if n_samples < n_classes:
        raise ValueError(f"n_samples={n_samples} cannot cover {n_classes} classes")
    counts = largest_remainder_counts(n_samples, class_ratios)
    if (counts == 0).any():
        empty = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"n_samples too small to give class {empty} at least 1 sample")
    if class_names is None:
        class_names = tuple(f"class{k}" for k in range(n_classes))
    if len(class_names) != n_classes:
        raise ValueError("class_names length must match class_ratios")

    c, side = spec.channels_per_modality, spec.image_side
    rng = np.random.default_rng(seed)
    templates = make_templates(n_modalities, n_classes, c, side, rng)
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), counts)
    labels = labels[rng.permutation(n_samples)]

    images = np.empty((n_samples, n_modalities, c, side, side), dtype=np.float32)
    for m in range(n_modalities):
        keep = rng.random(n_samples) < informativeness[m]
        pattern = np.where(keep, labels, rng.integers(0, n_classes, size=n_samples))
        imgs = templates[m, pattern]
        if noise_std > 0:
            imgs = imgs + noise_std * rng.standard_normal(imgs.shape, dtype=np.float32)
        images[:, m] = np.clip(imgs, 0.0, 1.0)
    images = np.round(images * 255.0).astype(np.float32) / np.float32(255.0)

    manifest = DatasetManifest(
        class_names=tuple(class_names),
        class_counts=tuple(int(x) for x in counts),
        modality_specs=tuple(ModalitySpec(m, c, side) for m in range(n_modalities)),
        sample_index=tuple((f"s{i:06d}", int(labels[i])) for i in range(n_samples)),
    )
    return MultimodalDataset(manifest, images, labels, templates=templates)


# -- batch construction --------------------------------------------------------


def make_aligned_batch(samples: list[MultimodalSample]) -> MimoBatch:
    """Concatenate each sample's modality images in slot order; all label rows equal."""
    if not samples:
        raise ValueError("cannot build a batch from zero samples")
    m = len(samples[0].images)
    shape = samples[0].images[0].shape
    for s in samples:
        if len(s.images) != m or any(img.shape != shape for img in s.images):
            raise ValueError("samples disagree on modality count or image shape")
    concat = np.stack([np.concatenate(s.images, axis=0) for s in samples])
    labels = np.tile(np.array([s.label for s in samples], dtype=np.int64), (m, 1))
    return MimoBatch(concat_input=concat, labels=labels, aligned=True)


def aligned_batch_from_arrays(images: np.ndarray, labels: np.ndarray) -> MimoBatch:
    """Fast path for (B, M, C, S, S) arrays already stacked in modality order."""
    b, m, c, s, _ = images.shape
    concat = np.ascontiguousarray(images).reshape(b, m * c, s, s)
    return MimoBatch(concat, np.tile(np.asarray(labels, dtype=np.int64), (m, 1)), aligned=True)


def make_independent_batch(
    dataset: MultimodalDataset, batch_size: int, rng_state: int | np.random.Generator
) -> MimoBatch:
    """Fill each modality slot with independently drawn specimens (uniform, with replacement)."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(rng_state) if isinstance(rng_state, int) else rng_state
    m = dataset.n_modalities
    idx = rng.integers(0, len(dataset), size=(m, batch_size))
    return _independent_batch_at(dataset, idx)


def _independent_batch_at(dataset: MultimodalDataset, idx: np.ndarray) -> MimoBatch:
    m, b = idx.shape
    c, s = dataset.channels_per_modality, dataset.image_side
    concat = np.empty((b, m * c, s, s), dtype=np.float32)
    for slot in range(m):
        concat[:, slot * c : (slot + 1) * c] = dataset.images[idx[slot], slot]
    return MimoBatch(concat, dataset.labels[idx].copy(), aligned=False)


class IndependentSampler:
    """Per-epoch batch stream: one independent shuffled pass per modality slot.

    Slots are never coordinated; each epoch reshuffles every stream. Batches
    cover the dataset once per slot per epoch (last batch may be short).
    """

    def __init__(self, dataset: MultimodalDataset, batch_size: int, rng: int | np.random.Generator):
        if len(dataset) == 0:
            raise ValueError("dataset is empty")
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.dataset = dataset
        self.batch_size = batch_size
        self.rng = np.random.default_rng(rng) if isinstance(rng, int) else rng

    @property
    def batches_per_epoch(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    def epoch(self):
        n, m = len(self.dataset), self.dataset.n_modalities
        perms = np.stack([self.rng.permutation(n) for _ in range(m)])
        for start in range(0, n, self.batch_size):
            yield _independent_batch_at(self.dataset, perms[:, start : start + self.batch_size])


class AlignedSampler:
    """Per-epoch aligned batch stream (single shuffled pass over specimens)."""

    def __init__(self, dataset: MultimodalDataset, batch_size: int, rng: int | np.random.Generator):
        if len(dataset) == 0:
            raise ValueError("dataset is empty")
        self.dataset = dataset
        self.batch_size = batch_size
        self.rng = np.random.default_rng(rng) if isinstance(rng, int) else rng

    @property
    def batches_per_epoch(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    def epoch(self):
        perm = self.rng.permutation(len(self.dataset))
        for start in range(0, len(perm), self.batch_size):
            idx = perm[start : start + self.batch_size]
            yield aligned_batch_from_arrays(self.dataset.images[idx], self.dataset.labels[idx])


# -- splitting and cropping ------------------------------------------------------


def stratified_kfold(dataset, n_folds: int = 5, seed: int = 0) -> FoldPlan:
    """Stratified fold assignment; per-class fold counts differ by at most 1."""
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    labels = dataset.labels if hasattr(dataset, "labels") else np.asarray(dataset, dtype=np.int64)
    rng = np.random.default_rng(seed)
    assignments = np.full(labels.shape[0], -1, dtype=np.int64)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < n_folds:
            warnings.warn(
                f"class {int(c)} has {idx.size} samples < {n_folds} folds; some folds get none",
                stacklevel=2,
            )
        idx = rng.permutation(idx)
        # round-robin with a per-class offset so leftover samples rotate folds
        assignments[idx] = (np.arange(idx.size) + int(c)) % n_folds
    return FoldPlan(n_folds=n_folds, assignments=assignments)


def center_crop(image: np.ndarray, target_side: int) -> np.ndarray:
    """Central target_side x target_side window of a (..., H, W) image."""
    h, w = image.shape[-2:]
    if h < target_side or w < target_side:
        raise ValueError(f"image {h}x{w} smaller than crop target {target_side}")
    top = (h - target_side) // 2
    left = (w - target_side) // 2
    return image[..., top : top + target_side, left : left + target_side]


# -- on-disk layout ---------------------------------------------------------------


def save_dataset(dataset: MultimodalDataset, out_dir, ext: str = "png", force: bool = False) -> Path:
    """Write one directory per modality plus a JSON manifest.

    Layout: mod0/ ... mod{M-1}/ with one `<specimen_id>.<ext>` file each.
    PNG requires 1- or 3-channel images; "npy" stores raw float arrays.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty (use force)")
        for child in sorted(out.rglob("*"), reverse=True):
            child.unlink() if child.is_file() else child.rmdir()
    out.mkdir(parents=True, exist_ok=True)
    c = dataset.channels_per_modality
    if ext == "png" and c not in (1, 3):
        raise ValueError(f"png supports 1 or 3 channels, dataset has {c}; use ext='npy'")
    if ext not in ("png", "npy"):
        raise ValueError(f"unsupported image ext {ext!r}")
    for m in range(dataset.n_modalities):
        (out / f"mod{m}").mkdir()
    for i, (sid, _) in enumerate(dataset.manifest.sample_index):
        for m in range(dataset.n_modalities):
            path = out / f"mod{m}" / f"{sid}.{ext}"
            img = dataset.images[i, m]
            if ext == "npy":
                np.save(path, img)
            else:
                _write_png(path, img)
    manifest = {
        "format_version": 1,
        "class_names": list(dataset.manifest.class_names),
        "class_counts": list(dataset.manifest.class_counts),
        "modalities": [
            {
                "modality_id": s.modality_id,
                "channels_per_modality": s.channels_per_modality,
                "image_side": s.image_side,
            }
            for s in dataset.manifest.modality_specs
        ],
        "image_ext": ext,
        "samples": [{"specimen_id": sid, "label": int(lab)} for sid, lab in dataset.manifest.sample_index],
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def _write_png(path: Path, img: np.ndarray) -> None:
    from PIL import Image

    arr = np.round(img * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def _read_image(path: Path, channels: int) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path).astype(np.float32)
    from PIL import Image

    arr = np.asarray(Image.open(path))
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    if arr.shape[0] != channels:
        raise ValueError(f"{path}: expected {channels} channels, found {arr.shape[0]}")
    return arr.astype(np.float32) / np.float32(255.0)


def load_dataset(in_dir) -> MultimodalDataset:
    """Read a dataset written by save_dataset."""
    root = Path(in_dir)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} under {root}")
    raw = json.loads(manifest_path.read_text())
    specs = tuple(
        ModalitySpec(d["modality_id"], d["channels_per_modality"], d["image_side"])
        for d in sorted(raw["modalities"], key=lambda d: d["modality_id"])
    )
    samples = raw["samples"]
    manifest = DatasetManifest(
        class_names=tuple(raw["class_names"]),
        class_counts=tuple(raw["class_counts"]),
        modality_specs=specs,
        sample_index=tuple((d["specimen_id"], int(d["label"])) for d in samples),
    )
    ext = raw["image_ext"]
    c, side = specs[0].channels_per_modality, specs[0].image_side
    images = np.empty((len(samples), len(specs), c, side, side), dtype=np.float32)
    for i, d in enumerate(samples):
        for m in range(len(specs)):
            images[i, m] = _read_image(root / f"mod{m}" / f"{d['specimen_id']}.{ext}", c)
    labels = np.array([d["label"] for d in samples], dtype=np.int64)
    return MultimodalDataset(manifest, images, labels)
