"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

Backend selection, in order of precedence:
  1. explicit `set_backend("numba" | "numpy")`,
  2. the MMFUSION_KERNELS environment variable ("numba", "numpy", "auto"),
  3. auto: numba if it imports, numpy otherwise.

Both backends implement the same stride-1 2D cross-correlation contract and
agree to float32 round-off; results are bit-deterministic within a backend.
"""

from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from . import numpy_impl

_ENV_VAR = "MMFUSION_KERNELS"
_backend_name: str | None = None
_backend_mod: ModuleType | None = None


def _load(name: str) -> ModuleType:
    if name == "numpy":
        return numpy_impl
    if name == "numba":
        from . import numba_impl

        return numba_impl
    raise ValueError(f"unknown kernel backend {name!r}; expected 'numba' or 'numpy'")


def _resolve_default() -> str:
    requested = os.environ.get(_ENV_VAR, "auto").strip().lower()
    if requested in ("numba", "numpy"):
        return requested
    if requested not in ("", "auto"):
        raise ValueError(f"{_ENV_VAR}={requested!r} not understood; use numba, numpy or auto")
    try:
        import numba  # noqa: F401

        return "numba"
    except ImportError:
        return "numpy"


def set_backend(name: str) -> None:
    """Force a kernel backend for the rest of the process."""
    global _backend_name, _backend_mod
    _backend_mod = _load(name)
    _backend_name = name


def active_backend() -> str:
    global _backend_name, _backend_mod
    if _backend_name is None:
        set_backend(_resolve_default())
    return _backend_name  # type: ignore[return-value]


def _mod() -> ModuleType:
    active_backend()
    return _backend_mod  # type: ignore[return-value]


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, pad: int = 0) -> np.ndarray:
    """Stride-1 'same-or-valid' convolution: (B,C,H,W) x (Co,C,kh,kw) -> (B,Co,Ho,Wo)."""
    return _mod().conv2d_forward(x, w, b, pad)


def conv2d_grad_w(x: np.ndarray, dout: np.ndarray, kh: int, kw: int, pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (dw, db) of conv2d_forward w.r.t. weights and bias."""
    return _mod().conv2d_grad_w(x, dout, kh, kw, pad)


def conv2d_grad_x(dout: np.ndarray, w: np.ndarray, pad: int = 0) -> np.ndarray:
    """Gradient w.r.t. the input: full correlation with flipped, transposed weights."""
    kh, kw = w.shape[2], w.shape[3]
    if pad > kh - 1 or pad > kw - 1:
        raise ValueError("conv2d_grad_x supports pad <= kernel_size - 1 only")
    w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return _mod().conv2d_forward(dout, w_t, None, kh - 1 - pad)
