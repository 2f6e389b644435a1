"""Config file handling: defaults, YAML loading, dotted-key overrides.

One config drives every CLI verb. Sections: [data] for the synthetic
surrogate or an on-disk dataset, [model] for the backbone, [train] for the
optimization recipe, [kd] for distillation.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .backbones import BackboneConfig
from .data import MultimodalDataset, ModalitySpec, generate_synthetic_dataset, load_dataset

# class profile mirrors a heavily imbalanced 5-class white-blood-cell count
_CLASS_COUNTS = (9616, 4448, 677, 124, 47)
_TOTAL = sum(_CLASS_COUNTS)

DEFAULT_CONFIG: dict = {
    "data": {
        "path": None,  # load an existing dataset directory instead of generating
        "n_samples": 1492,
        "class_ratios": [c / _TOTAL for c in _CLASS_COUNTS],
        "class_names": ["NEU", "LYM", "EOS", "MO", "BAS"],
        "n_modalities": 4,
        "channels_per_modality": 3,
        "image_side": 32,
        "informativeness": [0.85, 0.9, 0.9, 0.95],
        "noise_std": 0.05,
        "seed": 7,
        "image_ext": "png",
    },
    "model": {
        "backbone": "desknet",
        "stage_widths": [16, 32, 64],
        "stage_depth": 1,
    },
    "train": {
        "epochs": 6,
        "batch_size": 64,
        "lr": 0.05,
        "momentum": 0.9,
        "lr_schedule": "cosine",
        "seed": 1,
        "folds": 5,
    },
    "kd": {
        "temperature": 4.0,
    },
}


def _deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path | None = None) -> dict:
    """Defaults merged with an optional YAML config file."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text())
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config root must be a mapping")
        unknown = set(raw) - set(cfg)
        if unknown:
            raise ValueError(f"{path}: unknown config sections {sorted(unknown)}")
        cfg = _deep_merge(cfg, raw)
    return cfg


def apply_overrides(cfg: dict, pairs: list[str]) -> dict:
    """Apply `section.key=value` overrides (values parsed as YAML scalars)."""
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} must look like section.key=value")
        dotted, raw = pair.split("=", 1)
        keys = dotted.strip().split(".")
        node = cfg
        for k in keys[:-1]:
            if k not in node or not isinstance(node[k], dict):
                raise ValueError(f"override {pair!r}: no config section {k!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ValueError(f"override {pair!r}: unknown key {keys[-1]!r}")
        node[keys[-1]] = yaml.safe_load(raw)
    return cfg


def save_resolved(cfg: dict, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True))


def dataset_from_config(data_cfg: dict) -> MultimodalDataset:
    """Load the configured dataset directory, or generate the synthetic surrogate."""
    if data_cfg.get("path"):
        return load_dataset(data_cfg["path"])
    spec = ModalitySpec(
        modality_id=0,
        channels_per_modality=int(data_cfg["channels_per_modality"]),
        image_side=int(data_cfg["image_side"]),
    )
    n_modalities = int(data_cfg["n_modalities"])
    informativeness = data_cfg["informativeness"]
    if len(informativeness) != n_modalities:
        raise ValueError("data.informativeness length must equal data.n_modalities")
    return generate_synthetic_dataset(
        n_samples=int(data_cfg["n_samples"]),
        class_ratios=data_cfg["class_ratios"],
        spec=spec,
        modality_informativeness=informativeness,
        seed=int(data_cfg["seed"]),
        noise_std=float(data_cfg["noise_std"]),
        class_names=tuple(data_cfg["class_names"]),
    )


def backbone_from_config(model_cfg: dict, in_channels: int = 3) -> BackboneConfig:
    return BackboneConfig(
        name=model_cfg["backbone"],
        in_channels=in_channels,
        stage_widths=tuple(model_cfg["stage_widths"]),
        stage_depth=int(model_cfg["stage_depth"]),
    )
