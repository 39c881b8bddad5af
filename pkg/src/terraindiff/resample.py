"""Bilinear/nearest resampling with pixel-center alignment.

All routines treat pixel (i, j) as centered at (i + 0.5, j + 0.5) in pixel
coordinates, so resizing preserves constants and inverse maps round-trip.
Samples that fall outside the source raster, or whose bilinear support
touches a NaN, come back as NaN.
"""

from __future__ import annotations

import numpy as np


def bilinear_sample(values: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample at fractional pixel positions (row, col), NaN outside."""
    v = np.asarray(values, dtype=np.float64)
    h, w = v.shape
    r = np.asarray(rows, dtype=np.float64)
    c = np.asarray(cols, dtype=np.float64)

    inside = (r >= -0.5) & (r <= h - 0.5) & (c >= -0.5) & (c <= w - 0.5)
    rc = np.clip(r, 0.0, h - 1.0)
    cc = np.clip(c, 0.0, w - 1.0)
    r0 = np.floor(rc).astype(np.int64)
    c0 = np.floor(cc).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = rc - r0
    fc = cc - c0

    top = v[r0, c0] * (1.0 - fc) + v[r0, c1] * fc
    bot = v[r1, c0] * (1.0 - fc) + v[r1, c1] * fc
    out = top * (1.0 - fr) + bot * fr
    return np.where(inside, out, np.nan)


def resize_bilinear(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    h, w = v.shape
    if (out_h, out_w) == (h, w):
        return v.copy()
    rows = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    cols = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return bilinear_sample(v, rr, cc)


def resize_nearest(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    v = np.asarray(values)
    h, w = v.shape
    if (out_h, out_w) == (h, w):
        return v.copy()
    rows = np.clip(((np.arange(out_h) + 0.5) * (h / out_h) - 0.5).round(), 0, h - 1).astype(np.int64)
    cols = np.clip(((np.arange(out_w) + 0.5) * (w / out_w) - 0.5).round(), 0, w - 1).astype(np.int64)
    return v[np.ix_(rows, cols)]


def rotate_bilinear(values: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the raster center; pixels swept in from outside are NaN."""
    v = np.asarray(values, dtype=np.float64)
    h, w = v.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # inverse rotation: output pixel pulls from the source location
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    src_r = cy + (rr - cy) * cos_t - (cc - cx) * sin_t
    src_c = cx + (rr - cy) * sin_t + (cc - cx) * cos_t
    return bilinear_sample(v, src_r, src_c)


def rotate_nearest(values: np.ndarray, degrees: float, fill=False) -> np.ndarray:
    v = np.asarray(values)
    h, w = v.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    src_r = np.round(cy + (rr - cy) * cos_t - (cc - cx) * sin_t).astype(np.int64)
    src_c = np.round(cx + (rr - cy) * sin_t + (cc - cx) * cos_t).astype(np.int64)
    inside = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
    out = np.full(v.shape, fill, dtype=v.dtype)
    out[inside] = v[src_r[inside], src_c[inside]]
    return out
