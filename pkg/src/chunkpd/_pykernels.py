"""Pure-numpy bilinear sampling kernels (fallback for ``_ckernels``)."""

from __future__ import annotations

import numpy as np


def _source_coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, clamped to the valid range
    f = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    f = np.clip(f, 0.0, n_in - 1)
    i0 = np.floor(f).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, f - i0


def _blend(img: np.ndarray, y0, y1, x0, x1, wy, wx) -> np.ndarray:
    src = img.astype(np.float64, copy=False)
    wx = wx[..., None]
    wy = wy[..., None]
    top = (1.0 - wx) * src[y0, x0] + wx * src[y0, x1]
    bot = (1.0 - wx) * src[y1, x0] + wx * src[y1, x1]
    return ((1.0 - wy) * top + wy * bot).astype(np.float32)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    y0, y1, wy = _source_coords(out_h, img.shape[0])
    x0, x1, wx = _source_coords(out_w, img.shape[1])
    Y0, X0 = np.meshgrid(y0, x0, indexing="ij")
    Y1, X1 = np.meshgrid(y1, x1, indexing="ij")
    WY, WX = np.meshgrid(wy, wx, indexing="ij")
    return _blend(img, Y0, Y1, X0, X1, WY, WX)


def rotate_bilinear(img: np.ndarray, cos_t: float, sin_t: float, fill: float) -> np.ndarray:
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy, dx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    fx = cos_t * dx - sin_t * dy + cx
    fy = sin_t * dx + cos_t * dy + cy
    outside = (fx < 0.0) | (fy < 0.0) | (fx > w - 1) | (fy > h - 1)
    fx = np.where(outside, 0.0, fx)
    fy = np.where(outside, 0.0, fy)
    y0 = np.floor(fy).astype(np.intp)
    x0 = np.floor(fx).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    out = _blend(img, y0, y1, x0, x1, fy - y0, fx - x0)
    out[outside] = np.float32(fill)
    return out
