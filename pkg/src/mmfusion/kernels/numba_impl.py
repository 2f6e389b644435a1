"""Numba-jitted convolution kernels.

Accumulation order inside each output element is fixed, so results are
deterministic regardless of thread count (prange only splits independent
output elements across threads). No fastmath: reassociation would break
the bit-reproducibility contract.
"""

from __future__ import annotations

import os

import numpy as np

# default threading layer that needs no TBB/OMP probing; honored only if unset
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from numba import njit, prange  # noqa: E402


@njit(parallel=True, cache=True)
def _conv2d_padded(xp, w, b, ho, wo):  # pragma: no cover - jitted
    n = xp.shape[0]
    co, ci, kh, kw = w.shape
    out = np.empty((n, co, ho, wo), dtype=xp.dtype)
    for bi in prange(n):
        for o in range(co):
            for y in range(ho):
                row = np.full(wo, b[o], dtype=xp.dtype)
                for c in range(ci):
                    for ky in range(kh):
                        src = xp[bi, c, y + ky]
                        for kx in range(kw):
                            wv = w[o, c, ky, kx]
                            for x in range(wo):
                                row[x] += wv * src[kx + x]
                out[bi, o, y] = row
    return out


@njit(parallel=True, cache=True)
def _conv2d_grad_w_padded(xp, dout, kh, kw):  # pragma: no cover - jitted
    n, co, ho, wo = dout.shape
    ci = xp.shape[1]
    dw = np.zeros((co, ci, kh, kw), dtype=xp.dtype)
    db = np.zeros(co, dtype=xp.dtype)
    zero = xp[0, 0, 0, 0] * 0
    for o in prange(co):
        for c in range(ci):
            for ky in range(kh):
                for kx in range(kw):
                    acc = zero
                    for bi in range(n):
                        for y in range(ho):
                            acc += np.dot(dout[bi, o, y], xp[bi, c, y + ky, kx:kx + wo])
                    dw[o, c, ky, kx] = acc
        s = zero
        for bi in range(n):
            for y in range(ho):
                for x in range(wo):
                    s += dout[bi, o, y, x]
        db[o] = s
    return dw, db


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad:
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return np.ascontiguousarray(x)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, pad: int) -> np.ndarray:
    kh, kw = w.shape[2], w.shape[3]
    ho = x.shape[2] + 2 * pad - kh + 1
    wo = x.shape[3] + 2 * pad - kw + 1
    if b is None:
        b = np.zeros(w.shape[0], dtype=x.dtype)
    return _conv2d_padded(_pad(x, pad), np.ascontiguousarray(w), b, ho, wo)


def conv2d_grad_w(x: np.ndarray, dout: np.ndarray, kh: int, kw: int, pad: int) -> tuple[np.ndarray, np.ndarray]:
    return _conv2d_grad_w_padded(_pad(x, pad), np.ascontiguousarray(dout), kh, kw)
