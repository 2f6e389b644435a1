"""Training loops for every strategy, teacher management, cross-validation.

Strategies:
  single_m{m} - one network on modality m, standard cross-entropy;
  early       - one network, channel-concatenated aligned input, one head;
  late        - the M single networks evaluated jointly (probability average);
  mimo        - one network, M heads, independently sampled slots, summed CE;
  mimo_kd     - mimo plus per-head distillation from the M single-modality
                teachers (teacher m sees slot m's images, is never updated);
  early_kd    - early fusion distilled from the average of the M teachers'
                soft targets (a single head cannot match M teacher heads).

Every run is deterministic given its config: the config seed derives the
init and data-order streams, and the step sequence is strictly serial.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import losses
from .backbones import (
    BackboneConfig,
    ComplexityReport,
    HeadPlan,
    build_backbone,
    load_checkpoint,
    save_checkpoint,
)
from .data import (
    AlignedSampler,
    FoldPlan,
    IndependentSampler,
    MultimodalDataset,
    aligned_batch_from_arrays,
)
from .eval import MetricsReport, compute_metrics, render_csv, render_markdown
from .fusion import forward_late, predict_mimo
from .losses import DEFAULT_TEMPERATURE, loss_breakdown, soft_targets, total_grad

KD_STRATEGIES = ("mimo_kd", "early_kd")


def ladder_strategies(n_modalities: int) -> list[str]:
    """The full comparison ladder, one aggregate-table row per entry."""
    return [f"single_m{m}" for m in range(n_modalities)] + [
        "early",
        "late",
        "mimo",
        "early_kd",
        "mimo_kd",
    ]


def derive_seed(base_seed: int, *key: int) -> int:
    """Stable child seed for a (fold, strategy, ...) key."""
    ss = np.random.SeedSequence(int(base_seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1)[0])


@dataclass(frozen=True)
class TrainConfig:
    """Everything one training run depends on (besides the dataset itself)."""

    strategy: str
    epochs: int = 6
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    lr_schedule: str = "cosine"
    optimizer: str = "sgd-momentum"
    seed: int = 0
    temperature: float | None = None
    teacher_paths: tuple[str, ...] | None = None
    modality_id: int | None = None
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.optimizer != "sgd-momentum":
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        base = self.strategy.split("_m")[0] if self.strategy.startswith("single") else self.strategy
        if base not in ("single", "early", "late", "mimo", "mimo_kd", "early_kd"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if base == "single" and self.modality_id is None and "_m" not in self.strategy:
            raise ValueError("single-modality training needs modality_id (or strategy 'single_m<k>')")
        if base in ("mimo", "early", "late", "single") and (
            self.temperature is not None or self.teacher_paths is not None
        ):
            raise ValueError(
                f"strategy {self.strategy!r} takes no temperature/teachers; use 'mimo_kd' or 'early_kd'"
            )

    @property
    def kd_temperature(self) -> float:
        return DEFAULT_TEMPERATURE if self.temperature is None else float(self.temperature)

    def resolved_modality(self) -> int:
        if self.modality_id is not None:
            return int(self.modality_id)
        if "_m" in self.strategy:
            return int(self.strategy.split("_m")[1])
        raise ValueError("no modality id on this config")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = asdict(self.backbone)
        return d


@dataclass
class RunRecord:
    """Replayable trace of one training run.

    Re-running the snapshot config with the same seed reproduces the final
    checkpoint bit-for-bit under the single-threaded/serial-step contract.
    """

    strategy: str
    seed: int
    config: dict
    fold: int | None = None
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    checkpoint_path: str | None = None
    metrics: dict | None = None
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "fold": self.fold,
            "config": self.config,
            "steps": self.steps,
            "epochs": self.epochs,
            "checkpoint_path": self.checkpoint_path,
            "metrics": self.metrics,
            "wall_seconds": self.wall_seconds,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


class _SgdMomentum:
    def __init__(self, params: dict[str, np.ndarray], momentum: float):
        self.momentum = np.float32(momentum)
        self.vel = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        lr = np.float32(lr)
        for k, g in grads.items():
            v = self.vel[k]
            v *= self.momentum
            v -= lr * g
            params[k] += v


def _lr_at(config: TrainConfig, step: int, total_steps: int) -> float:
    """Cosine decay with a linear warmup over the first tenth of training."""
    if config.lr_schedule == "constant":
        return config.lr
    warmup = max(1, total_steps // 10)
    if step < warmup:
        return config.lr * (step + 1) / warmup
    frac = (step - warmup) / max(1, total_steps - warmup)
    return config.lr * 0.5 * (1.0 + np.cos(np.pi * frac))


def _run_training(model, config: TrainConfig, n_heads: int, stream_fn, n_batches: int,
                  record: RunRecord, temperature: float | None) -> None:
    """Serial step loop shared by all strategies.

    stream_fn(epoch) yields (x, labels (n_heads, B), target_probs or None).
    """
    opt = _SgdMomentum(model.params, config.momentum)
    total_steps = config.epochs * n_batches
    k = model.head_plan.n_classes
    step = 0
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        epoch_bd: list[losses.LossBreakdown] = []
        for x, labels, target_probs in stream_fn(epoch):
            logits2d, cache = model.forward_train(x)
            logits = logits2d.reshape(-1, n_heads, k)
            bd = loss_breakdown(logits, labels, target_probs, temperature or DEFAULT_TEMPERATURE)
            g = total_grad(logits, labels, target_probs, temperature or DEFAULT_TEMPERATURE)
            grads = model.backward(cache, g.reshape(logits2d.shape).astype(np.float32))
            opt.step(model.params, grads, _lr_at(config, step, total_steps))
            record.steps.append(bd.to_record(step))
            epoch_bd.append(bd)
            step += 1
        record.epochs.append(
            {
                "epoch": epoch,
                "l_m": float(np.mean([b.l_m for b in epoch_bd])),
                "l_kd": float(np.mean([b.l_kd for b in epoch_bd])),
                "l_total": float(np.mean([b.l_total for b in epoch_bd])),
                "per_head_ce": np.mean([b.per_head_ce for b in epoch_bd], axis=0).tolist(),
            }
        )
    record.wall_seconds = time.perf_counter() - t0


def _new_record(config: TrainConfig, fold: int | None) -> RunRecord:
    return RunRecord(strategy=config.strategy, seed=config.seed, config=config.to_dict(), fold=fold)


def _build(config: TrainConfig, in_channels: int, n_heads: int, n_classes: int):
    bcfg = replace(config.backbone, in_channels=in_channels)
    return build_backbone(bcfg, HeadPlan(n_heads=n_heads, n_classes=n_classes),
                          seed=np.random.SeedSequence(config.seed, spawn_key=(0,)))


def _data_rng(config: TrainConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))


# -- strategy trainers -------------------------------------------------------------


def train_single(dataset: MultimodalDataset, config: TrainConfig, fold: int | None = None):
    """Train one network on one modality with standard cross-entropy."""
    m = config.resolved_modality()
    if not 0 <= m < dataset.n_modalities:
        raise ValueError(f"modality {m} not in dataset with M={dataset.n_modalities}")
    model = _build(config, dataset.channels_per_modality, 1, dataset.n_classes)
    images = dataset.modality_images(m)
    rng = _data_rng(config)
    n = len(dataset)

    def stream(_epoch):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            yield images[idx], dataset.labels[idx][None, :], None

    record = _new_record(config, fold)
    _run_training(model, config, 1, stream, -(-n // config.batch_size), record, None)
    return model, record


def train_early(dataset: MultimodalDataset, config: TrainConfig, fold: int | None = None):
    """Train early fusion: aligned channel-concatenated input, one head."""
    model = _build(config, dataset.n_modalities * dataset.channels_per_modality, 1, dataset.n_classes)
    sampler = AlignedSampler(dataset, config.batch_size, _data_rng(config))

    def stream(_epoch):
        for batch in sampler.epoch():
            yield batch.concat_input, batch.labels[:1], None

    record = _new_record(config, fold)
    _run_training(model, config, 1, stream, sampler.batches_per_epoch, record, None)
    return model, record


def train_late(dataset: MultimodalDataset, config: TrainConfig, fold: int | None = None):
    """Train the M single-modality networks with independent derived seeds."""
    out = []
    for m in range(dataset.n_modalities):
        cfg_m = replace(
            config,
            strategy=f"single_m{m}",
            modality_id=m,
            seed=derive_seed(config.seed, m),
        )
        out.append(train_single(dataset, cfg_m, fold=fold))
    return out


def train_mimo(dataset: MultimodalDataset, config: TrainConfig, fold: int | None = None):
    """Train the multi-head network on independently sampled slots (summed CE)."""
    m = dataset.n_modalities
    model = _build(config, m * dataset.channels_per_modality, m, dataset.n_classes)
    sampler = IndependentSampler(dataset, config.batch_size, _data_rng(config))

    def stream(_epoch):
        for batch in sampler.epoch():
            yield batch.concat_input, batch.labels, None

    record = _new_record(config, fold)
    _run_training(model, config, m, stream, sampler.batches_per_epoch, record, None)
    return model, record


def _teacher_soft_targets(teachers, batch, temperature: float) -> np.ndarray:
    """Per-slot teacher soft targets on the slot's own images, shape (B, M, K)."""
    logits = np.stack(
        [teachers[m].forward(batch.slot_images(m)) for m in range(batch.n_modalities)], axis=1
    )
    return soft_targets(logits, temperature)


def resolve_teachers(dataset: MultimodalDataset, teachers=None, paths=None):
    """Load/validate the M frozen single-modality teachers, indexed by modality."""
    if teachers is None:
        if not paths:
            raise ValueError("knowledge distillation needs teacher models or checkpoint paths")
        loaded = {}
        for p in paths:
            model, header = load_checkpoint(p)
            mid = header["extra"].get("modality_id")
            if mid is None:
                raise ValueError(f"{p}: checkpoint does not record a modality_id")
            if mid in loaded:
                raise ValueError(f"duplicate teacher for modality {mid}")
            loaded[int(mid)] = model
        teachers = [loaded[m] for m in range(dataset.n_modalities) if m in loaded]
        if sorted(loaded) != list(range(dataset.n_modalities)):
            raise ValueError(
                f"teacher modality ids {sorted(loaded)} must cover 0..{dataset.n_modalities - 1} exactly once"
            )
    if len(teachers) != dataset.n_modalities:
        raise ValueError(f"need {dataset.n_modalities} teachers, got {len(teachers)}")
    for m, t in enumerate(teachers):
        if t.head_plan.n_heads != 1 or t.head_plan.n_classes != dataset.n_classes:
            raise ValueError(f"teacher {m}: head plan {t.head_plan} incompatible with dataset")
        if t.config.in_channels != dataset.channels_per_modality:
            raise ValueError(f"teacher {m}: expects {t.config.in_channels} channels")
    return teachers


def train_mimo_kd(dataset: MultimodalDataset, config: TrainConfig, teachers=None,
                  fold: int | None = None):
    """Train the multi-head student under summed CE plus per-head distillation."""
    teachers = resolve_teachers(dataset, teachers, config.teacher_paths)
    t = config.kd_temperature
    m = dataset.n_modalities
    model = _build(config, m * dataset.channels_per_modality, m, dataset.n_classes)
    sampler = IndependentSampler(dataset, config.batch_size, _data_rng(config))

    def stream(_epoch):
        for batch in sampler.epoch():
            yield batch.concat_input, batch.labels, _teacher_soft_targets(teachers, batch, t)

    record = _new_record(config, fold)
    _run_training(model, config, m, stream, sampler.batches_per_epoch, record, t)
    return model, record


def train_early_kd(dataset: MultimodalDataset, config: TrainConfig, teachers=None,
                   fold: int | None = None):
    """Train early fusion distilled from the averaged teacher soft targets."""
    teachers = resolve_teachers(dataset, teachers, config.teacher_paths)
    t = config.kd_temperature
    model = _build(config, dataset.n_modalities * dataset.channels_per_modality, 1, dataset.n_classes)
    sampler = AlignedSampler(dataset, config.batch_size, _data_rng(config))

    def stream(_epoch):
        for batch in sampler.epoch():
            targets = _teacher_soft_targets(teachers, batch, t).mean(axis=1, keepdims=True)
            yield batch.concat_input, batch.labels[:1], targets

    record = _new_record(config, fold)
    _run_training(model, config, 1, stream, sampler.batches_per_epoch, record, t)
    return model, record


# -- evaluation over frozen models -------------------------------------------------


def predict_single_probs(model, modality_id: int, dataset: MultimodalDataset,
                         batch_size: int = 256) -> np.ndarray:
    images = dataset.modality_images(modality_id)
    chunks = []
    for start in range(0, len(dataset), batch_size):
        logits = model.forward(images[start : start + batch_size])
        chunks.append(losses.softmax(np.asarray(logits, dtype=np.float64)))
    return np.concatenate(chunks, axis=0)


def predict_early_probs(model, dataset: MultimodalDataset, batch_size: int = 256) -> np.ndarray:
    chunks = []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, min(start + batch_size, len(dataset)))
        batch = aligned_batch_from_arrays(dataset.images[sl], dataset.labels[sl])
        logits = model.forward(batch.concat_input)
        chunks.append(losses.softmax(np.asarray(logits, dtype=np.float64)))
    return np.concatenate(chunks, axis=0)


def predict_late_probs(models, dataset: MultimodalDataset, batch_size: int = 256) -> np.ndarray:
    chunks = []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, min(start + batch_size, len(dataset)))
        batch = aligned_batch_from_arrays(dataset.images[sl], dataset.labels[sl])
        _, pred = forward_late(models, batch)
        chunks.append(pred.probs)
    return np.concatenate(chunks, axis=0)


def predict_mimo_probs(model, dataset: MultimodalDataset, batch_size: int = 256) -> np.ndarray:
    chunks = []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, min(start + batch_size, len(dataset)))
        batch = aligned_batch_from_arrays(dataset.images[sl], dataset.labels[sl])
        chunks.append(predict_mimo(model, batch).probs)
    return np.concatenate(chunks, axis=0)


def strategy_complexity(strategy: str, models, dataset: MultimodalDataset) -> ComplexityReport:
    """Forward FLOPs/params of one evaluated strategy at the dataset's input shape."""
    c, s = dataset.channels_per_modality, dataset.image_side
    if strategy.startswith("single"):
        return models.complexity((c, s, s))
    if strategy == "late":
        reports = [t.complexity((c, s, s)) for t in models]
        out = reports[0]
        for r in reports[1:]:
            out = out + r
        return out
    return models.complexity((dataset.n_modalities * c, s, s))


# -- cross-validation harness -------------------------------------------------------


@dataclass
class CvResult:
    records: list
    per_fold: dict  # (strategy, fold) -> MetricsReport
    aggregate_rows: list


def format_mean_std(values, nd: int = 2) -> str:
    arr = np.asarray(values, dtype=np.float64)
    return f"{arr.mean():.{nd}f} ± {arr.std():.{nd}f}"


def _check_split(train_idx: np.ndarray, val_idx: np.ndarray, n: int) -> None:
    overlap = np.intersect1d(train_idx, val_idx)
    if overlap.size:
        raise RuntimeError(f"train/validation overlap on {overlap.size} samples; aborting")
    if len(np.union1d(train_idx, val_idx)) != n:
        raise RuntimeError("train and validation folds do not cover the dataset")


def run_fold_ladder(
    dataset: MultimodalDataset,
    train_idx: np.ndarray,
    val_idx: np.ndarray,
    config: TrainConfig,
    fold: int = 0,
    strategies: list[str] | None = None,
    temperature: float | None = None,
    teachers=None,
    run_writer=None,
) -> tuple[dict, list]:
    """Train and evaluate the strategy ladder on one train/validation split.

    Returns ({strategy: MetricsReport}, [RunRecord, ...]). `teachers` may carry
    pre-trained single-modality models (indexed by modality) to reuse.
    """
    _check_split(train_idx, val_idx, len(dataset))
    strategies = strategies or ladder_strategies(dataset.n_modalities)
    train_set = dataset.subset(train_idx)
    val_set = dataset.subset(val_idx)
    t = DEFAULT_TEMPERATURE if temperature is None else float(temperature)

    needs_singles = any(
        s.startswith("single") or s in ("late",) + KD_STRATEGIES for s in strategies
    )
    singles: dict[int, tuple] = {}
    records, written = [], []
    if teachers is not None:
        singles = {m: (t_model, None) for m, t_model in enumerate(teachers)}
    elif needs_singles:
        late_cfg = replace(config, strategy="late", seed=derive_seed(config.seed, fold, 0))
        for m, (model, rec) in enumerate(train_late(train_set, late_cfg, fold=fold)):
            singles[m] = (model, rec)
            records.append(rec)
            written.append((rec, model))

    reports: dict[str, MetricsReport] = {}
    labels = val_set.labels

    def finish(strategy, probs, models, rec):
        report = compute_metrics(probs, labels, complexity=strategy_complexity(strategy, models, dataset))
        reports[strategy] = report
        if rec is not None:
            rec.metrics = {
                **report.metric_dict(),
                "flops": report.complexity.flops,
                "params": report.complexity.params,
            }

    teacher_models = lambda: [singles[m][0] for m in range(dataset.n_modalities)]  # noqa: E731
    for pos, strategy in enumerate(strategies):
        seed = derive_seed(config.seed, fold, 1 + pos)
        if strategy.startswith("single"):
            m = int(strategy.split("_m")[1])
            model, rec = singles[m]
            finish(strategy, predict_single_probs(model, m, val_set), model, rec)
        elif strategy == "late":
            models = teacher_models()
            rec = _new_record(replace(config, strategy="late"), fold)
            finish(strategy, predict_late_probs(models, val_set), models, rec)
            records.append(rec)
            written.append((rec, []))  # checkpoints live with the single runs
        elif strategy == "early":
            model, rec = train_early(train_set, replace(config, strategy="early", seed=seed), fold)
            finish(strategy, predict_early_probs(model, val_set), model, rec)
            records.append(rec)
            written.append((rec, model))
        elif strategy == "mimo":
            model, rec = train_mimo(train_set, replace(config, strategy="mimo", seed=seed), fold)
            finish(strategy, predict_mimo_probs(model, val_set), model, rec)
            records.append(rec)
            written.append((rec, model))
        elif strategy == "mimo_kd":
            cfg = replace(config, strategy="mimo_kd", seed=seed, temperature=t)
            model, rec = train_mimo_kd(train_set, cfg, teachers=teacher_models(), fold=fold)
            finish(strategy, predict_mimo_probs(model, val_set), model, rec)
            records.append(rec)
            written.append((rec, model))
        elif strategy == "early_kd":
            cfg = replace(config, strategy="early_kd", seed=seed, temperature=t)
            model, rec = train_early_kd(train_set, cfg, teachers=teacher_models(), fold=fold)
            finish(strategy, predict_early_probs(model, val_set), model, rec)
            records.append(rec)
            written.append((rec, model))
        else:
            raise ValueError(f"unknown ladder strategy {strategy!r}")
    if run_writer is not None:
        for rec, models in written:
            run_writer(rec, models)
    return reports, records


def run_cross_validation(
    dataset: MultimodalDataset,
    fold_plan: FoldPlan,
    config: TrainConfig,
    strategies: list[str] | None = None,
    temperature: float | None = None,
    folds: list[int] | None = None,
    run_writer=None,
    teachers_for_fold=None,
) -> CvResult:
    """Train on the non-validation folds and evaluate on each validation fold."""
    if fold_plan.assignments.shape[0] != len(dataset):
        raise ValueError("fold plan does not match dataset size")
    strategies = strategies or ladder_strategies(dataset.n_modalities)
    folds = list(range(fold_plan.n_folds)) if folds is None else list(folds)
    per_fold, records = {}, []
    for k in folds:
        reports, recs = run_fold_ladder(
            dataset,
            fold_plan.train_indices(k),
            fold_plan.val_indices(k),
            config,
            fold=k,
            strategies=strategies,
            temperature=temperature,
            teachers=teachers_for_fold(k) if teachers_for_fold is not None else None,
            run_writer=run_writer,
        )
        records.extend(recs)
        for strategy, rep in reports.items():
            per_fold[(strategy, k)] = rep

    rows = []
    for strategy in strategies:
        reps = [per_fold[(strategy, k)] for k in folds]
        row = {"method": strategy}
        for name in ("weighted_f1", "weighted_sensitivity", "weighted_specificity", "weighted_auc"):
            row[name] = format_mean_std([getattr(r, name) for r in reps])
        row["flops"] = reps[0].complexity.flops
        row["params"] = reps[0].complexity.params
        rows.append(row)
    return CvResult(records=records, per_fold=per_fold, aggregate_rows=rows)


# -- run directory layout -------------------------------------------------------------


def make_run_writer(out_root, resolved_config: dict | None = None, timestamp: str | None = None):
    """Writer that persists each run under runs/<timestamp>-<strategy>-fold<k>/."""
    root = Path(out_root)

    def write(record: RunRecord, models) -> Path:
        ts = timestamp or time.strftime("%Y%m%d-%H%M%S")
        fold = 0 if record.fold is None else record.fold
        run_dir = root / "runs" / f"{ts}-{record.strategy}-fold{fold}"
        run_dir.mkdir(parents=True, exist_ok=True)
        model_list = models if isinstance(models, (list, tuple)) else [models]
        for i, model in enumerate(model_list):
            extra = {"strategy": record.strategy}
            if record.strategy.startswith("single"):
                extra["modality_id"] = int(record.strategy.split("_m")[1])
            name = "model.ckpt" if len(model_list) == 1 else f"model_m{i}.ckpt"
            save_checkpoint(run_dir / name, model, seed=record.seed, extra=extra)
            if len(model_list) == 1:
                record.checkpoint_path = str(run_dir / name)
        record.save(run_dir / "record.json")
        if resolved_config is not None:
            (run_dir / "config.yaml").write_text(yaml.safe_dump(resolved_config, sort_keys=True))
        return run_dir

    return write


def write_aggregate(out_root, rows: list[dict]) -> None:
    root = Path(out_root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "aggregate.csv").write_text(render_csv(rows))
    (root / "aggregate.md").write_text(render_markdown(rows))
    (root / "aggregate.json").write_text(json.dumps(rows, indent=1))
