"""Core raster data model: elevation grids, validity masks, normalization.

A grid is an immutable 2D single-channel raster of floats (elevations in
meters, or unitless logits/probabilities). Invalid pixels are stored in-band
as NaN; validity is always derivable as ``np.isfinite(values)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Immutable single-channel raster with a minimal georeferencing stub.

    ``values`` has shape (height, width), row-major with the top row first.
    ``origin`` is the world coordinate of the top-left pixel corner and
    ``pixel_size`` the ground sampling distance in meters per pixel.
    """

    values: np.ndarray
    pixel_size: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"grid values must be 2D, got shape {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError("grid must be at least 1x1")
        if self.pixel_size <= 0:
            raise ValueError("pixel_size must be > 0")
        if not np.issubdtype(v.dtype, np.floating):
            v = v.astype(np.float32)
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def valid_mask(self) -> "Mask":
        """Mask of finite pixels."""
        return Mask(np.isfinite(self.values))

    def with_values(self, values: np.ndarray) -> "Grid":
        """New grid with the same georeferencing and different values."""
        return Grid(values, pixel_size=self.pixel_size, origin=self.origin)


@dataclass(frozen=True)
class Mask:
    """Boolean raster paired with a grid; True means valid (or ground)."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise ValueError(f"mask bits must be 2D, got shape {b.shape}")
        b = b.astype(bool).copy()
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def count(self) -> int:
        return int(self.bits.sum())

    def __and__(self, other: "Mask") -> "Mask":
        return Mask(self.bits & other.bits)


@dataclass(frozen=True)
class NormParams:
    """Affine range parameters of the [-1, 1] min-max map."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (self.hi > self.lo):
            raise ValueError("degenerate range")

    @property
    def scale(self) -> float:
        """Normalized units per meter."""
        return 2.0 / (self.hi - self.lo)


def _check_same_shape(a, b, what: str = "grids"):
    if a.shape != b.shape:
        raise ValueError(f"{what} have mismatched shapes {a.shape} vs {b.shape}")


def normalize(
    dsm: Grid,
    dtm: Grid | None,
    valid: Mask | None = None,
) -> tuple[Grid, Grid | None, NormParams]:
    """Min-max normalize elevation rasters jointly into [-1, 1].

    The range is the combined min/max over valid pixels of both rasters
    (over the surface raster alone when no terrain raster is supplied,
    as at inference time). Valid pixels map to [-1, 1]; invalid pixels are
    set to exactly 0 in the output and never contribute to the range.
    """
    if valid is None:
        valid = dsm.valid_mask()
        if dtm is not None:
            valid = valid & dtm.valid_mask()
    _check_same_shape(dsm.values, valid.bits, "grid and mask")
    if dtm is not None:
        _check_same_shape(dsm.values, dtm.values)

    bits = valid.bits & np.isfinite(dsm.values)
    if dtm is not None:
        bits = bits & np.isfinite(dtm.values)
    if not bits.any():
        raise ValueError("empty raster")

    lo = float(dsm.values[bits].min())
    hi = float(dsm.values[bits].max())
    if dtm is not None:
        lo = min(lo, float(dtm.values[bits].min()))
        hi = max(hi, float(dtm.values[bits].max()))
    if hi == lo:
        raise ValueError("degenerate range")
    params = NormParams(lo, hi)

    def apply(g: Grid) -> Grid:
        out = 2.0 * (g.values - lo) / (hi - lo) - 1.0
        out = np.where(bits, out, 0.0).astype(g.values.dtype)
        return g.with_values(out)

    return apply(dsm), (apply(dtm) if dtm is not None else None), params


def denormalize(grid: Grid, params: NormParams) -> Grid:
    """Invert the [-1, 1] min-max map back to meters."""
    out = (grid.values + 1.0) * 0.5 * (params.hi - params.lo) + params.lo
    return grid.with_values(out.astype(grid.values.dtype))


def ground_mask(dsm: Grid, dtm: Grid, alpha: float) -> Mask:
    """Pixels where the surface sits within ``alpha`` of the terrain.

    True iff |dsm - dtm| < alpha and both pixels are valid. Units of
    ``alpha`` must match the units of the rasters (meters for raw grids,
    normalized units for normalized grids).
    """
    _check_same_shape(dsm.values, dtm.values)
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    diff = np.abs(dsm.values - dtm.values)
    bits = (diff < alpha) & np.isfinite(dsm.values) & np.isfinite(dtm.values)
    return Mask(bits)


def grad_values(values: np.ndarray, pixel_size: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Forward-difference derivatives (d/dx, d/dy) with edge replication.

    The last column/row derivative copies the previous one; a missing axis
    (1xN or Nx1 input) contributes a zero derivative. NaN propagates through
    the stencil so invalid pixels stay invalid.
    """
    v = np.asarray(values, dtype=np.float64)
    h, w = v.shape
    dx = np.zeros_like(v)
    dy = np.zeros_like(v)
    if w >= 2:
        dx[:, :-1] = v[:, 1:] - v[:, :-1]
        dx[:, -1] = dx[:, -2]
    if h >= 2:
        dy[:-1, :] = v[1:, :] - v[:-1, :]
        dy[-1, :] = dy[-2, :]
    return dx / pixel_size, dy / pixel_size


def grad_magnitude(grid: Grid) -> Grid:
    """Per-pixel gradient magnitude sqrt(dx^2 + dy^2) in units per meter."""
    dx, dy = grad_values(grid.values, grid.pixel_size)
    return grid.with_values(np.sqrt(dx * dx + dy * dy).astype(grid.values.dtype))


# ---------------------------------------------------------------------------
# invertible normalization strategies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormContext:
    """Invertible per-sample affine elevation transform.

    ``kind`` picks the strategy; the transform itself is always
    x_norm = (x - offset) * gain with invalid pixels forced to 0.
    """

    kind: str
    offset: float
    gain: float

    def apply(self, values: np.ndarray, valid: np.ndarray) -> np.ndarray:
        out = (values - self.offset) * self.gain
        return np.where(valid, out, 0.0)

    def invert(self, values: np.ndarray) -> np.ndarray:
        return values / self.gain + self.offset

    def alpha_scaled(self, alpha_meters: float) -> float:
        return alpha_meters * self.gain


def norm_context(
    kind: str,
    s_values: np.ndarray,
    g_values: np.ndarray | None,
    valid: np.ndarray,
    corpus_stats: tuple[float, float] | None = None,
) -> NormContext:
    """Build the transform from the valid pixels of one or two rasters.

    "minmax" maps the joint range onto [-1, 1] (a constant raster falls
    back to a unit range centered on it, so the inverse still holds);
    "zscore" uses corpus-wide statistics; "meanshift" recenters only.
    """
    pool = s_values[valid]
    if g_values is not None:
        pool = np.concatenate([pool, g_values[valid]])
    if pool.size == 0:
        raise ValueError("empty raster")
    if kind == "minmax":
        lo, hi = float(pool.min()), float(pool.max())
        if hi == lo:
            lo, hi = lo - 1.0, hi + 1.0
        return NormContext(kind, offset=(lo + hi) / 2.0, gain=2.0 / (hi - lo))
    if kind == "zscore":
        if corpus_stats is None:
            raise ValueError("zscore normalization needs corpus statistics")
        mean, std = corpus_stats
        return NormContext(kind, offset=mean, gain=1.0 / max(std, 1e-9))
    if kind == "meanshift":
        return NormContext(kind, offset=float(pool.mean()), gain=1.0)
    raise ValueError(f"unknown normalization {kind!r}")
