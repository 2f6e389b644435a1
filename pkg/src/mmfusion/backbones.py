"""Feature extractors, head planning, complexity accounting, checkpoints.

One backbone implementation ("desknet", a small plain CNN) serves every
fusion strategy; strategies differ only in the input channel count and the
width of the final affine layer. Larger architectures can be registered as
plug-ins via `register_backbone`.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels

CHECKPOINT_MAGIC = b"MMFUSCKPT\n"
CHECKPOINT_VERSION = 1

# FLOP convention used by every report in this package: convolutions and
# affine layers cost 2 ops per multiply-accumulate (bias adds not counted),
# activations and pooling cost their per-element op count.
FLOP_CONVENTION = "2*MAC for conv/affine (bias excluded); per-element for activations/pooling"


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture hyperparameters for one network."""

    name: str = "desknet"
    in_channels: int = 3
    stage_widths: tuple[int, ...] = (16, 32, 64)
    stage_depth: int = 1

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        if not self.stage_widths or any(w < 1 for w in self.stage_widths):
            raise ValueError("stage_widths must be positive")
        if self.stage_depth < 1:
            raise ValueError("stage_depth must be positive")
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))

    @property
    def feature_dim(self) -> int:
        return self.stage_widths[-1]


@dataclass(frozen=True)
class HeadPlan:
    """Output layout: n_heads contiguous groups of n_classes logits."""

    n_heads: int
    n_classes: int

    def __post_init__(self):
        if self.n_heads < 1 or self.n_classes < 2:
            raise ValueError("need n_heads >= 1 and n_classes >= 2")

    @property
    def out_units(self) -> int:
        return self.n_heads * self.n_classes


@dataclass(frozen=True)
class ComplexityReport:
    """Forward-pass FLOPs and trainable parameter count for one model."""

    flops: int
    params: int
    convention: str = FLOP_CONVENTION

    def __post_init__(self):
        if self.flops <= 0 or self.params <= 0:
            raise ValueError("flops and params must be strictly positive")

    def __add__(self, other: "ComplexityReport") -> "ComplexityReport":
        return ComplexityReport(self.flops + other.flops, self.params + other.params, self.convention)


class DeskNet:
    """Small plain CNN: [conv3x3 + leaky-relu] x depth + avgpool2 per stage, GAP,
    fixed RMS feature normalization, affine head.

    Parameters live in `params` (float32, insertion-ordered); forward/backward
    run on the kernels backend. The input side must be divisible by
    2**len(stage_widths). Leaky activations and the parameter-free feature
    norm keep the tiny unnormalized trunk trainable under the large
    distillation gradients (T^2-scaled).
    """

    KERNEL = 3
    PAD = 1
    LEAK = np.float32(0.1)
    NORM_EPS = np.float32(1e-6)

    def __init__(self, config: BackboneConfig, head_plan: HeadPlan, seed: int | np.random.SeedSequence = 0):
        self.config = config
        self.head_plan = head_plan
        self.params: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        c_in = config.in_channels
        for s, width in enumerate(config.stage_widths):
            for d in range(config.stage_depth):
                fan_in = c_in * self.KERNEL * self.KERNEL
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(width, c_in, self.KERNEL, self.KERNEL))
                self.params[f"conv{s}_{d}_w"] = w.astype(np.float32)
                self.params[f"conv{s}_{d}_b"] = np.zeros(width, dtype=np.float32)
                c_in = width
        # modest head init keeps the initial softmax near uniform (features are RMS-normalized)
        hw = rng.normal(0.0, 0.1 / np.sqrt(config.feature_dim), size=(head_plan.out_units, config.feature_dim))
        self.params["head_w"] = hw.astype(np.float32)
        self.params["head_b"] = np.zeros(head_plan.out_units, dtype=np.float32)

    # -- forward / backward ------------------------------------------------

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected input (B, {self.config.in_channels}, S, S), got {x.shape}"
            )
        scale = 2 ** len(self.config.stage_widths)
        if x.shape[2] % scale or x.shape[3] % scale:
            raise ValueError(f"input side must be divisible by {scale}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluation-mode forward: (B, in_channels, S, S) -> (B, out_units) logits."""
        return self._forward(x, keep_cache=False)[0]

    def forward_train(self, x: np.ndarray):
        """Forward keeping activations needed for `backward`."""
        return self._forward(x, keep_cache=True)

    def _forward(self, x: np.ndarray, keep_cache: bool):
        self._check_input(x)
        # fixed centering for [0,1] image inputs; gradient-transparent
        x = np.ascontiguousarray(x, dtype=np.float32) - np.float32(0.5)
        cache: list = []
        for s in range(len(self.config.stage_widths)):
            for d in range(self.config.stage_depth):
                w = self.params[f"conv{s}_{d}_w"]
                b = self.params[f"conv{s}_{d}_b"]
                pre = kernels.conv2d_forward(x, w, b, pad=self.PAD)
                if keep_cache:
                    cache.append((x, pre > 0))
                x = np.where(pre > 0, pre, self.LEAK * pre)
            x = _avgpool2(x)
        feat = x.mean(axis=(2, 3))
        rms = np.sqrt(np.mean(np.square(feat), axis=1, keepdims=True) + self.NORM_EPS)
        normed = feat / rms
        if keep_cache:
            cache.append((x.shape, rms, normed))
        logits = normed @ self.params["head_w"].T + self.params["head_b"]
        return logits, cache if keep_cache else None

    def backward(self, cache: list, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients from the upstream logit gradient (float32)."""
        grads: dict[str, np.ndarray] = {}
        pooled_shape, rms, normed = cache[-1]
        dlogits = np.ascontiguousarray(dlogits, dtype=np.float32)
        grads["head_w"] = dlogits.T @ normed
        grads["head_b"] = dlogits.sum(axis=0)
        dnormed = dlogits @ self.params["head_w"]
        dfeat = (dnormed - normed * np.mean(dnormed * normed, axis=1, keepdims=True)) / rms
        hw = pooled_shape[2] * pooled_shape[3]
        d = np.broadcast_to(
            (dfeat / np.float32(hw))[:, :, None, None], pooled_shape
        ).astype(np.float32)
        idx = len(cache) - 2
        for s in reversed(range(len(self.config.stage_widths))):
            d = _avgpool2_backward(d)
            for dep in reversed(range(self.config.stage_depth)):
                x_in, relu_mask = cache[idx]
                idx -= 1
                d = np.where(relu_mask, d, self.LEAK * d)
                w = self.params[f"conv{s}_{dep}_w"]
                dw, db = kernels.conv2d_grad_w(x_in, d, self.KERNEL, self.KERNEL, pad=self.PAD)
                grads[f"conv{s}_{dep}_w"] = dw
                grads[f"conv{s}_{dep}_b"] = db
                if idx >= 0:  # no input gradient needed below the first conv
                    d = kernels.conv2d_grad_x(d, w, pad=self.PAD)
        return grads

    # -- accounting ----------------------------------------------------------

    def complexity(self, input_shape: tuple[int, int, int], batch_size: int = 1) -> ComplexityReport:
        c, h, w = input_shape
        if c != self.config.in_channels:
            raise ValueError(f"input_shape channels {c} != configured {self.config.in_channels}")
        scale = 2 ** len(self.config.stage_widths)
        if h % scale or w % scale:
            raise ValueError(f"input side must be divisible by {scale}")
        k2 = self.KERNEL * self.KERNEL
        flops = c * h * w  # input centering
        c_in = c
        for width in self.config.stage_widths:
            for _ in range(self.config.stage_depth):
                flops += 2 * k2 * c_in * width * h * w  # conv, 2*MAC
                flops += width * h * w  # relu
                c_in = width
            flops += width * h * w  # avgpool2: 4 ops per output = 1 per input
            h //= 2
            w //= 2
        flops += c_in * h * w  # global average pool
        flops += 3 * self.config.feature_dim  # RMS feature norm: square-acc + scale
        flops += 2 * self.config.feature_dim * self.head_plan.out_units  # head affine
        return ComplexityReport(flops=flops * batch_size, params=count_params(self))


def _avgpool2(x: np.ndarray) -> np.ndarray:
    return (
        x[:, :, 0::2, 0::2] + x[:, :, 0::2, 1::2] + x[:, :, 1::2, 0::2] + x[:, :, 1::2, 1::2]
    ) * np.float32(0.25)


def _avgpool2_backward(d: np.ndarray) -> np.ndarray:
    b, c, h, w = d.shape
    up = np.empty((b, c, h, 2, w, 2), dtype=d.dtype)
    up[...] = (d / np.float32(4.0))[:, :, :, None, :, None]
    return up.reshape(b, c, 2 * h, 2 * w)


# -- registry ---------------------------------------------------------------

_BACKBONES = {"desknet": DeskNet}


def register_backbone(name: str, factory) -> None:
    """Register a plug-in backbone factory(config, head_plan, seed) -> model."""
    _BACKBONES[name] = factory


def build_backbone(config: BackboneConfig, head_plan: HeadPlan, seed: int | np.random.SeedSequence = 0):
    """Build a model with deterministic initialization given the seed."""
    try:
        factory = _BACKBONES[config.name]
    except KeyError:
        known = ", ".join(sorted(_BACKBONES))
        raise ValueError(f"unknown backbone {config.name!r}; registered: {known}") from None
    return factory(config, head_plan, seed)


def count_params(model) -> int:
    """Exact count of trainable scalars."""
    return int(sum(p.size for p in model.params.values()))


def count_flops(model, input_shape: tuple[int, int, int], batch_size: int = 1) -> int:
    """Forward-pass FLOPs at the given (C, H, W) input shape (see FLOP_CONVENTION)."""
    return model.complexity(input_shape, batch_size=batch_size).flops


# -- checkpoint container -----------------------------------------------------


def save_checkpoint(path, model, seed: int = 0, extra: dict | None = None) -> None:
    """Write a self-describing, byte-stable checkpoint file."""
    arrays = [
        {"name": k, "dtype": str(v.dtype), "shape": list(v.shape)} for k, v in model.params.items()
    ]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "backbone_config": asdict(model.config),
        "head_plan": asdict(model.head_plan),
        "seed": int(seed),
        "extra": extra or {},
        "arrays": arrays,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for v in model.params.values():
            fh.write(np.ascontiguousarray(v).tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (model, header dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        hlen = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(hlen))
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        cfg_d = dict(header["backbone_config"])
        cfg_d["stage_widths"] = tuple(cfg_d["stage_widths"])
        config = BackboneConfig(**cfg_d)
        head_plan = HeadPlan(**header["head_plan"])
        model = build_backbone(config, head_plan, seed=header["seed"])
        for spec in header["arrays"]:
            n = int(np.prod(spec["shape"])) if spec["shape"] else 1
            dt = np.dtype(spec["dtype"])
            buf = fh.read(n * dt.itemsize)
            model.params[spec["name"]] = np.frombuffer(buf, dtype=dt).reshape(spec["shape"]).copy()
    return model, header


def param_bytes(model) -> bytes:
    """Concatenated raw parameter bytes; used to assert teacher freezing."""
    return b"".join(np.ascontiguousarray(p).tobytes() for p in model.params.values())
