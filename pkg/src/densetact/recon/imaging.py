"""Resampling and target scaling for network inputs/outputs."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError


def _axis_weights(n_in: int, n_out: int):
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, pos - i0


def resize_bilinear(t: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize with corner-aligned sampling.

    ``t`` is HxW or HxWxC. Output pixel ``i`` samples input position
    ``i * (H - 1) / (out_h - 1)``; equal sizes return an exact copy.
    """
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"output size must be positive, got {out_h}x{out_w}")
    t = np.asarray(t)
    h, w = t.shape[:2]
    if h < 2 or w < 2:
        raise ShapeError("input must be at least 2x2")
    if (out_h, out_w) == (h, w):
        return t.copy()
    src = t.astype(np.float64)
    r0, r1, fr = _axis_weights(h, out_h)
    c0, c1, fc = _axis_weights(w, out_w)
    extra = (1,) * (t.ndim - 2)
    fr = fr.reshape((-1, 1) + extra)
    fc = fc.reshape((1, -1) + extra)
    rows = src[r0] * (1.0 - fr) + src[r1] * fr
    return rows[:, c0] * (1.0 - fc) + rows[:, c1] * fc


def rescale_target(codes, lo: float = 10.0, hi: float = 1000.0) -> np.ndarray:
    """Depth codes 0..255 -> network target range [lo, hi]."""
    return lo + np.asarray(codes, dtype=np.float64) * ((hi - lo) / 255.0)


def unscale_target(y, lo: float = 10.0, hi: float = 1000.0) -> np.ndarray:
    return (np.asarray(y, dtype=np.float64) - lo) * (255.0 / (hi - lo))
