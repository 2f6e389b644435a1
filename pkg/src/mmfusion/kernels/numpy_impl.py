"""Pure-numpy convolution kernels (im2col + BLAS matmul)."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Unfold (B,C,H,W) into patch rows of shape (B*Ho*Wo, C*kh*kw), stride 1."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # B,C,Ho,Wo,kh,kw
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, pad: int) -> np.ndarray:
    """Stride-1 cross-correlation of (B,C,H,W) with (Co,C,kh,kw) weights."""
    n = x.shape[0]
    co, _, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, pad)
    out = cols @ w.reshape(co, -1).T
    if b is not None:
        out += b
    return np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))


def conv2d_grad_w(x: np.ndarray, dout: np.ndarray, kh: int, kw: int, pad: int) -> tuple[np.ndarray, np.ndarray]:
    """Weight and bias gradients for conv2d_forward."""
    n, co, ho, wo = dout.shape
    c = x.shape[1]
    cols, _, _ = _im2col(x, kh, kw, pad)
    dout_mat = dout.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
    dw = (dout_mat.T @ cols).reshape(co, c, kh, kw)
    db = dout.sum(axis=(0, 2, 3))
    return dw, db
