"""Evaluation metrics (regression, classification, point-distance, surface
roughness) and Laplacian smoothing.

World coordinates: a pixel (row, col) is centered at
(x0 + (col + 0.5) * pixel_size, y0 + (row + 0.5) * pixel_size), with rows
growing downward from the top-left origin.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .grid import Grid, Mask
from .resample import bilinear_sample


@dataclass(frozen=True)
class MetricsReport:
    rmse: float
    mae: float
    e_t1: float
    e_t2: float
    e_tot: float
    med: float | None = None
    mad: float | None = None


def _bits(m) -> np.ndarray:
    return m.bits if isinstance(m, Mask) else np.asarray(m, dtype=bool)


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Grid) else np.asarray(x)


def regression_metrics(pred, truth, m) -> tuple[float, float]:
    """(root-mean-square error, mean absolute error) over valid pixels."""
    p, t, bits = _values(pred), _values(truth), _bits(m)
    if p.shape != t.shape or p.shape != bits.shape:
        raise ValueError("shape mismatch")
    n = int(bits.sum())
    if n == 0:
        raise ValueError("empty mask")
    d = (p - t)[bits]
    return float(np.sqrt((d * d).sum() / n)), float(np.abs(d).sum() / n)


class ClassificationErrors(NamedTuple):
    e_t1: float  # percent of truly non-ground pixels kept as ground
    e_t2: float  # percent of truly ground pixels removed as non-ground
    e_tot: float  # percent of all valid pixels misclassified
    e_sum: float  # e_t1 + e_t2, reported alongside for comparison
    t1_defined: bool
    t2_defined: bool


def classification_errors(prob, gt_ground, m, threshold: float = 0.5) -> ClassificationErrors:
    p, truth, bits = _values(prob), _bits(gt_ground), _bits(m)
    n = int(bits.sum())
    if n == 0:
        raise ValueError("empty mask")
    pred_ground = p >= threshold
    non_ground = bits & ~truth
    ground = bits & truth
    n_non = int(non_ground.sum())
    n_gnd = int(ground.sum())
    e_t1 = 100.0 * pred_ground[non_ground].sum() / n_non if n_non else 0.0
    e_t2 = 100.0 * (~pred_ground[ground]).sum() / n_gnd if n_gnd else 0.0
    mis = int((pred_ground[bits] != truth[bits]).sum())
    e_tot = 100.0 * mis / n
    return ClassificationErrors(float(e_t1), float(e_t2), e_tot, float(e_t1 + e_t2), n_non > 0, n_gnd > 0)


class MedResult(NamedTuple):
    value: float
    n_used: int
    n_skipped: int


def med(pred: Grid, points) -> MedResult:
    """Mean vertical distance from (x, y, z) points to the raster surface,
    sampled bilinearly; points outside the raster extent are skipped."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must be an (n, 3) array of x, y, z")
    cols = (pts[:, 0] - pred.origin[0]) / pred.pixel_size - 0.5
    rows = (pts[:, 1] - pred.origin[1]) / pred.pixel_size - 0.5
    surface = bilinear_sample(pred.values, rows, cols)
    ok = np.isfinite(surface)
    if not ok.any():
        return MedResult(float("nan"), 0, int(len(pts)))
    dist = np.abs(pts[ok, 2] - surface[ok])
    return MedResult(float(dist.mean()), int(ok.sum()), int((~ok).sum()))


def _surface_normals(values: np.ndarray, pixel_size: float) -> np.ndarray:
    """Unit normals from central-difference slopes (one-sided at edges)."""
    dz_dr, dz_dc = np.gradient(values.astype(np.float64), pixel_size)
    normals = np.stack([-dz_dc, -dz_dr, np.ones_like(dz_dr)], axis=-1)
    norm = np.linalg.norm(normals, axis=-1, keepdims=True)
    return normals / norm


def mad(pred: Grid) -> float:
    """Mean angle in degrees between surface normals of 4-neighbor pixel
    pairs; exactly zero for any plane."""
    v = pred.values
    if v.shape[0] < 3 or v.shape[1] < 3:
        raise ValueError("roughness needs at least a 3x3 raster")
    n = _surface_normals(v, pred.pixel_size)
    angles = []
    for a, b in (((slice(None), slice(None, -1)), (slice(None), slice(1, None))),
                 ((slice(None, -1), slice(None)), (slice(1, None), slice(None)))):
        # chord-based angle: free of the cancellation arccos suffers near 1;
        # chords below float64 noise count as parallel so planes score 0
        chord = np.linalg.norm(n[a] - n[b], axis=-1)
        chord = np.where(chord < 1e-12, 0.0, chord)
        angles.append(np.degrees(2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))).reshape(-1))
    all_angles = np.concatenate(angles)
    all_angles = all_angles[np.isfinite(all_angles)]
    if all_angles.size == 0:
        raise ValueError("no valid neighbor pairs")
    return float(all_angles.mean())


def laplacian_smooth(grid: Grid, iterations: int = 20, factor: float = 0.5) -> Grid:
    """Iterative relaxation toward the 4-neighbor mean.

    Out-of-bounds neighbors replicate the boundary pixel along axes of
    length >= 2 (a single row or column smooths along its only axis).
    Invalid pixels are excluded from neighbor means and left unchanged.
    """
    if not (0.0 < factor <= 1.0):
        raise ValueError("factor must lie in (0, 1]")
    v = grid.values.astype(np.float64).copy()
    valid = np.isfinite(v)
    h, w = v.shape
    for _ in range(iterations):
        nbr_sum = np.zeros_like(v)
        nbr_cnt = np.zeros_like(v)
        for axis, size in ((0, h), (1, w)):
            if size < 2:
                continue
            for shift in (1, -1):
                shifted = np.roll(v, shift, axis=axis)
                shifted_valid = np.roll(valid, shift, axis=axis)
                # replicate the border: rolling wrapped the far edge in
                if axis == 0 and shift == 1:
                    shifted[0, :], shifted_valid[0, :] = v[0, :], valid[0, :]
                elif axis == 0:
                    shifted[-1, :], shifted_valid[-1, :] = v[-1, :], valid[-1, :]
                elif shift == 1:
                    shifted[:, 0], shifted_valid[:, 0] = v[:, 0], valid[:, 0]
                else:
                    shifted[:, -1], shifted_valid[:, -1] = v[:, -1], valid[:, -1]
                use = shifted_valid & valid
                nbr_sum += np.where(use, np.nan_to_num(shifted), 0.0)
                nbr_cnt += use
        has_nbr = nbr_cnt > 0
        mean = np.where(has_nbr, nbr_sum / np.maximum(nbr_cnt, 1), v)
        v = np.where(valid & has_nbr, v + factor * (mean - np.nan_to_num(v)), v)
    return grid.with_values(v)


def full_report(pred: Grid, truth: Grid, prob: Grid | None, gt_ground: Mask | None, m: Mask) -> MetricsReport:
    rmse, mae = regression_metrics(pred, truth, m)
    if prob is not None and gt_ground is not None:
        ce = classification_errors(prob, gt_ground, m)
        e_t1, e_t2, e_tot = ce.e_t1, ce.e_t2, ce.e_tot
    else:
        e_t1 = e_t2 = e_tot = 0.0
    mad_val = mad(pred) if min(pred.shape) >= 3 else None
    return MetricsReport(rmse, mae, e_t1, e_t2, e_tot, med=None, mad=mad_val)
