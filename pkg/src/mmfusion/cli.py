"""Command-line entry point.

Verbs: gen-data, train, cv, eval, probe, report. Every run writes its fully
resolved config next to its outputs; validation failures exit nonzero with a
machine-readable JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import train as training
from .backbones import load_checkpoint
from .config import (
    apply_overrides,
    backbone_from_config,
    dataset_from_config,
    load_config,
    save_resolved,
)
from .data import load_dataset, save_dataset, stratified_kfold
from .eval import (
    confidence_probe,
    compute_metrics,
    plot_confidence_profile,
    probe_mode_name,
    write_metrics_json,
)
from .train import (
    TrainConfig,
    ladder_strategies,
    make_run_writer,
    run_cross_validation,
    write_aggregate,
)

VALIDATION_ERRORS = (ValueError, FileExistsError, FileNotFoundError, KeyError, RuntimeError)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="YAML config file")
    p.add_argument("--seed", type=int, default=None, help="override train.seed and data.seed")
    p.add_argument(
        "-o",
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted config override, e.g. -o train.epochs=3",
    )


def _resolve_config(args) -> dict:
    cfg = load_config(args.config)
    apply_overrides(cfg, args.override)
    if getattr(args, "seed", None) is not None:
        cfg["train"]["seed"] = args.seed
        cfg["data"]["seed"] = args.seed
    if getattr(args, "temperature", None) is not None:
        cfg["kd"]["temperature"] = args.temperature
    if getattr(args, "backbone", None) is not None:
        cfg["model"]["backbone"] = args.backbone
    if getattr(args, "folds", None) is not None:
        cfg["train"]["folds"] = args.folds
    if getattr(args, "data", None):
        cfg["data"]["path"] = str(args.data)
    return cfg


def _train_config(cfg: dict, strategy: str, temperature: float | None = None,
                  teacher_paths: tuple[str, ...] | None = None) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        strategy=strategy,
        epochs=int(t["epochs"]),
        batch_size=int(t["batch_size"]),
        lr=float(t["lr"]),
        momentum=float(t["momentum"]),
        lr_schedule=t["lr_schedule"],
        seed=int(t["seed"]),
        temperature=temperature,
        teacher_paths=teacher_paths,
        backbone=backbone_from_config(cfg["model"]),
    )


def _run_id(tag: str) -> str:
    return f"{time.strftime('%Y%m%d-%H%M%S')}-{tag}"


# -- verbs ------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    cfg["data"]["path"] = None  # always generate for this verb
    out = Path(args.out)
    dataset = dataset_from_config(cfg["data"])
    save_dataset(dataset, out, ext=cfg["data"]["image_ext"], force=args.force)
    save_resolved(cfg, out / "config.yaml")
    print(f"wrote {len(dataset)} samples x {dataset.n_modalities} modalities to {out}")
    print(f"class counts: {list(dataset.manifest.class_counts)}")
    return 0


def _split_for(args, cfg, dataset):
    if args.fold is None:
        return np.arange(len(dataset)), None
    plan = stratified_kfold(dataset, n_folds=int(cfg["train"]["folds"]), seed=int(cfg["train"]["seed"]))
    return plan.train_indices(args.fold), plan.val_indices(args.fold)


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    dataset = dataset_from_config(cfg["data"])
    temperature = float(cfg["kd"]["temperature"]) if args.strategy.endswith("_kd") else None
    teacher_paths = tuple(str(p) for p in args.teachers) if args.teachers else None
    tcfg = _train_config(cfg, args.strategy, temperature, teacher_paths)
    train_idx, val_idx = _split_for(args, cfg, dataset)
    train_set = dataset.subset(train_idx)

    if args.strategy.startswith("single"):
        model, record = training.train_single(train_set, tcfg, fold=args.fold)
        models = model
    elif args.strategy == "early":
        model, record = training.train_early(train_set, tcfg, fold=args.fold)
        models = model
    elif args.strategy == "mimo":
        model, record = training.train_mimo(train_set, tcfg, fold=args.fold)
        models = model
    elif args.strategy == "mimo_kd":
        model, record = training.train_mimo_kd(train_set, tcfg, fold=args.fold)
        models = model
    elif args.strategy == "early_kd":
        model, record = training.train_early_kd(train_set, tcfg, fold=args.fold)
        models = model
    elif args.strategy == "late":
        pairs = training.train_late(train_set, tcfg, fold=args.fold)
        writer = make_run_writer(args.out, resolved_config=cfg)
        for m_model, m_rec in pairs:
            if val_idx is not None:
                m = m_rec.config["modality_id"]
                probs = training.predict_single_probs(m_model, m, dataset.subset(val_idx))
                m_rec.metrics = compute_metrics(probs, dataset.labels[val_idx]).metric_dict()
            writer(m_rec, m_model)
        print(f"trained {len(pairs)} single-modality networks under {args.out}/runs/")
        return 0
    else:
        raise ValueError(f"unknown strategy {args.strategy!r}")

    if val_idx is not None:
        probs = _strategy_probs(args.strategy, models, dataset.subset(val_idx))
        report = compute_metrics(probs, dataset.subset(val_idx).labels)
        record.metrics = report.metric_dict()
        print(json.dumps(record.metrics, indent=1))
    run_dir = make_run_writer(args.out, resolved_config=cfg)(record, models)
    print(f"run written to {run_dir}")
    return 0


def _strategy_probs(strategy, models, dataset):
    if strategy.startswith("single"):
        m = int(strategy.split("_m")[1]) if "_m" in strategy else 0
        return training.predict_single_probs(models, m, dataset)
    if strategy in ("early", "early_kd"):
        return training.predict_early_probs(models, dataset)
    if strategy in ("mimo", "mimo_kd"):
        return training.predict_mimo_probs(models, dataset)
    if strategy == "late":
        return training.predict_late_probs(models, dataset)
    raise ValueError(f"unknown strategy {strategy!r}")


def _teacher_loader(runs_root: Path, n_modalities: int):
    """Locate reusable single-modality checkpoints under a previous output root."""

    def load_for_fold(fold: int):
        teachers = []
        for m in range(n_modalities):
            matches = sorted((runs_root / "runs").glob(f"*-single_m{m}-fold{fold}/model.ckpt"))
            if not matches:
                raise FileNotFoundError(
                    f"--reuse-teachers: no checkpoint for single_m{m} fold {fold} under {runs_root}"
                )
            model, _ = load_checkpoint(matches[-1])
            teachers.append(model)
        return teachers

    return load_for_fold


def cmd_cv(args) -> int:
    cfg = _resolve_config(args)
    dataset = dataset_from_config(cfg["data"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_resolved(cfg, out / "config.yaml")
    plan = stratified_kfold(dataset, n_folds=int(cfg["train"]["folds"]), seed=int(cfg["train"]["seed"]))
    tcfg = _train_config(cfg, "mimo")
    teachers_for_fold = (
        _teacher_loader(Path(args.reuse_teachers), dataset.n_modalities)
        if args.reuse_teachers
        else None
    )
    result = run_cross_validation(
        dataset,
        plan,
        tcfg,
        strategies=ladder_strategies(dataset.n_modalities),
        temperature=float(cfg["kd"]["temperature"]),
        folds=args.only_folds,
        run_writer=make_run_writer(out, resolved_config=cfg),
        teachers_for_fold=teachers_for_fold,
    )
    write_aggregate(out, result.aggregate_rows)
    from .eval import render_markdown

    print(render_markdown(result.aggregate_rows))
    print(f"aggregate written to {out}/aggregate.{{csv,md,json}}")
    return 0


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    models, strategies = [], set()
    for p in args.checkpoint:
        model, header = load_checkpoint(p)
        models.append(model)
        strategies.add(header["extra"].get("strategy", "unknown"))
    if len(models) > 1:
        strategy = "late"
        models_arg = models
    else:
        strategy = next(iter(strategies))
        models_arg = models[0]
    probs = _strategy_probs(strategy, models_arg, dataset)
    report = compute_metrics(
        probs, dataset.labels, complexity=training.strategy_complexity(strategy, models_arg, dataset)
    )
    path = write_metrics_json(report, args.out, _run_id(strategy))
    print(json.dumps(report.metric_dict(), indent=1))
    print(f"metrics written to {path}")
    return 0


def cmd_probe(args) -> int:
    dataset = load_dataset(args.data)
    model, _ = load_checkpoint(args.checkpoint)
    if args.mode == "full":
        modes: list = ["all"] + list(range(dataset.n_modalities))
    else:
        modes = ["all" if args.mode == "all" else int(args.mode)]
    out_dir = Path(args.out) / "eval" / _run_id("probe")
    out_dir.mkdir(parents=True, exist_ok=True)
    for mode in modes:
        profile = confidence_probe(model, dataset, mode, fill=args.fill)
        name = probe_mode_name(mode, args.fill)
        plot_confidence_profile(profile, out_dir / f"fig4_{name}.png")
        (out_dir / f"profile_{name}.json").write_text(json.dumps(profile.to_dict(), indent=1))
        means = ", ".join(f"head{h}={v:.3f}" for h, v in enumerate(profile.head_means))
        print(f"{name}: {means}")
    print(f"probe artifacts under {out_dir}")
    return 0


def cmd_report(args) -> int:
    root = Path(args.runs)
    records = sorted(root.glob("runs/*/record.json"))
    if not records:
        raise FileNotFoundError(f"no run records under {root}")
    by_strategy: dict[str, list[dict]] = {}
    for rp in records:
        rec = json.loads(rp.read_text())
        if rec.get("metrics"):
            by_strategy.setdefault(rec["strategy"], []).append(rec["metrics"])
    rows = []
    for strategy, metrics in by_strategy.items():
        row = {"method": strategy}
        for key in ("weighted_f1", "weighted_sensitivity", "weighted_specificity", "weighted_auc"):
            row[key] = training.format_mean_std([m[key] for m in metrics])
        for key in ("flops", "params"):
            if key in metrics[0]:
                row[key] = metrics[0][key]
        rows.append(row)
    from .eval import render_csv, render_markdown

    out = root / "report"
    out.mkdir(exist_ok=True)
    (out / "aggregate.csv").write_text(render_csv(rows))
    (out / "aggregate.md").write_text(render_markdown(rows))
    print(render_markdown(rows))
    return 0


# -- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmfusion",
        description="Multimodal fusion strategies with distillation, at desk scale.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty target")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one strategy")
    _add_common(p)
    p.add_argument("--data", type=Path, default=None, help="dataset directory (default: generate)")
    p.add_argument("--strategy", required=True,
                   help="single_m<k> | early | late | mimo | mimo_kd | early_kd")
    p.add_argument("--out", type=Path, default=Path("artifacts"))
    p.add_argument("--fold", type=int, default=None, help="hold out this validation fold")
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--backbone", default=None)
    p.add_argument("--teachers", nargs="+", default=None, help="teacher checkpoints for *_kd")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("cv", help="cross-validate the full strategy ladder")
    _add_common(p)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--out", type=Path, default=Path("artifacts"))
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--only-folds", type=int, nargs="+", default=None,
                   help="run a subset of folds (default: all)")
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--backbone", default=None)
    p.add_argument("--reuse-teachers", type=Path, default=None,
                   help="output root of a previous run holding single_m* checkpoints")
    p.set_defaults(fn=cmd_cv)

    p = sub.add_parser("eval", help="evaluate checkpoints on a dataset")
    p.add_argument("--checkpoint", nargs="+", required=True,
                   help="one checkpoint, or M single-modality checkpoints for late fusion")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("artifacts"))
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("probe", help="head-confidence probe of a multi-head checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--mode", default="full", help="'full' (all 1+M probes), 'all', or a modality index")
    p.add_argument("--fill", choices=("replicate", "zeros"), default="replicate")
    p.add_argument("--out", type=Path, default=Path("artifacts"))
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("report", help="re-render the aggregate table from run records")
    p.add_argument("--runs", type=Path, required=True, help="output root of a previous cv")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except VALIDATION_ERRORS as exc:
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
