"""Large-raster inference: a global low-resolution terrain prior, overlapping
tile generation conditioned on that prior, and weighted blending.

Pipeline: the surface raster is downsampled to one network tile and run
through the generator to get a coarse terrain prior; the full-resolution
raster is then cut into overlapping tiles, each tile's reverse chain starts
from the matching crop of the upsampled prior, and the per-tile outputs are
merged by the selected blend mode. Every tile is normalized from its own
surface crop, and the prior crop shares that tile's normalization.

Tiles are processed in index order with a generator seeded by
(seed, tile index), so results do not depend on scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil

import numpy as np

from .denoiser import DenoiserModel
from .grid import Grid, norm_context
from .resample import resize_bilinear
from .sampling import sample_batch
from .schedule import DiffusionSchedule

BLEND_MODES = ("mean", "min", "max", "linear", "cosine", "exp")


@dataclass(frozen=True)
class TileLayout:
    tile: int
    stride: int
    width: int
    height: int
    origins: tuple[tuple[int, int], ...]  # (row, col) of each tile
    n_x: int
    n_y: int


def _axis_origins(extent: int, tile: int, stride: int) -> list[int]:
    count = ceil((extent - tile) / stride) + 1
    return [min(k * stride, extent - tile) for k in range(count)]


def tile_grid(width: int, height: int, tile: int, stride: int) -> TileLayout:
    """Overlapping tile origins; the last tile clamps to the raster edge."""
    if tile > width or tile > height:
        raise ValueError("input smaller than tile")
    if not (1 <= stride <= tile):
        raise ValueError("stride must lie in [1, tile]")
    rows = _axis_origins(height, tile, stride)
    cols = _axis_origins(width, tile, stride)
    origins = tuple((r, c) for r in rows for c in cols)
    return TileLayout(tile, stride, width, height, origins, n_x=len(cols), n_y=len(rows))


def _axis_ramp(mode: str, tile: int, overlap: int, ramp_lo: bool, ramp_hi: bool) -> np.ndarray:
    d = np.arange(tile, dtype=np.float64)
    if overlap <= 0 or mode == "mean":
        return np.ones(tile)
    reach = np.minimum(d + 1.0, overlap + 1.0) / (overlap + 1.0)
    if mode == "linear":
        ramp = reach
    elif mode == "cosine":
        ramp = 0.5 * (1.0 - np.cos(np.pi * reach))
    elif mode == "exp":
        ramp = 1.0 - np.exp(-4.0 * reach)
    else:
        raise ValueError(f"no ramp for mode {mode!r}")
    w = np.ones(tile)
    if ramp_lo:
        w = w * ramp
    if ramp_hi:
        w = w * ramp[::-1]
    return w


def blend_weights(mode: str, tile: int, stride: int) -> np.ndarray:
    """Weight field of a fully interior tile. Selection modes (min/max) and
    mean carry uniform weights."""
    if mode not in BLEND_MODES:
        raise ValueError(f"unknown blend mode {mode!r}; expected one of {BLEND_MODES}")
    overlap = tile - stride
    if mode in ("mean", "min", "max"):
        return np.ones((tile, tile))
    wy = _axis_ramp(mode, tile, overlap, True, True)
    return np.outer(wy, wy)


def _tile_weights(mode: str, layout: TileLayout, origin: tuple[int, int]) -> np.ndarray:
    """Per-tile weights: ramps apply only on edges shared with a neighbor."""
    overlap = layout.tile - layout.stride
    if mode in ("mean", "min", "max") or overlap <= 0:
        return np.ones((layout.tile, layout.tile))
    r, c = origin
    wy = _axis_ramp(mode, layout.tile, overlap, ramp_lo=r > 0, ramp_hi=r + layout.tile < layout.height)
    wx = _axis_ramp(mode, layout.tile, overlap, ramp_lo=c > 0, ramp_hi=c + layout.tile < layout.width)
    return np.outer(wy, wx)


def estimate_runtime(
    width: int, height: int, tile: int, stride: int, T: int, per_step_seconds: float = 0.06
) -> float:
    """Predicted wall time: tile count times per-tile generation cost."""
    layout = tile_grid(width, height, tile, stride)
    return layout.n_x * layout.n_y * T * per_step_seconds


def build_prior(
    sched: DiffusionSchedule,
    model: DenoiserModel,
    dsm: Grid,
    tile: int,
    seed: int = 0,
    T_r: int | None = None,
) -> Grid:
    """Coarse terrain raster: downsample, generate, upsample back. Input and
    output are in meters; normalization is internal."""
    small = dsm.values if dsm.shape == (tile, tile) else resize_bilinear(dsm.values, tile, tile)
    valid = np.isfinite(small)
    ctx = norm_context("minmax", small, None, valid)
    s_n = ctx.apply(np.nan_to_num(small), valid).astype(np.float32)
    rng = np.random.default_rng([seed, 999_999_937])  # stream disjoint from tile indices
    terrain, _ = sample_batch(sched, model, s_n[None], "noisy_dsm", T_r or sched.T, rng)
    coarse = ctx.invert(terrain[0])
    if coarse.shape != dsm.shape:
        coarse = resize_bilinear(coarse, dsm.height, dsm.width)
    return dsm.with_values(coarse.astype(dsm.values.dtype))


def stitch(
    sched: DiffusionSchedule,
    model: DenoiserModel,
    dsm: Grid,
    tile: int,
    stride: int,
    mode: str = "min",
    use_prior: bool = True,
    seed: int = 0,
    T_r: int | None = None,
) -> tuple[Grid, Grid]:
    """Generate terrain for a raster of any size covered by the tile layout.

    Returns (terrain in meters, blended ground probability). Weighted modes
    normalize by the per-pixel weight sum; min/max select per pixel and
    average the probabilities.
    """
    if mode not in BLEND_MODES:
        raise ValueError(f"unknown blend mode {mode!r}; expected one of {BLEND_MODES}")
    T_r = T_r or sched.T
    layout = tile_grid(dsm.width, dsm.height, tile, stride)
    prior = build_prior(sched, model, dsm, tile, seed=seed, T_r=T_r) if use_prior else None

    h, w = dsm.shape
    if mode == "min":
        terrain_acc = np.full((h, w), np.inf)
    elif mode == "max":
        terrain_acc = np.full((h, w), -np.inf)
    else:
        terrain_acc = np.zeros((h, w))
    weight_acc = np.zeros((h, w))
    prob_acc = np.zeros((h, w))
    prob_weight = np.zeros((h, w))

    for index, (r, c) in enumerate(layout.origins):
        window = np.s_[r : r + tile, c : c + tile]
        crop = dsm.values[window]
        valid = np.isfinite(crop)
        if not valid.any():
            continue
        ctx = norm_context("minmax", crop, None, valid)
        s_n = ctx.apply(np.nan_to_num(crop), valid).astype(np.float32)
        rng = np.random.default_rng([seed, index])
        try:
            if use_prior:
                prior_n = ctx.apply(np.nan_to_num(prior.values[window]), valid).astype(np.float32)
                pred_n, prob = sample_batch(sched, model, s_n[None], "prior_dtm", T_r, rng, prior=prior_n[None])
            else:
                pred_n, prob = sample_batch(sched, model, s_n[None], "noisy_dsm", T_r, rng)
        except Exception as exc:
            raise RuntimeError(f"tile {index} at origin ({r}, {c}) failed: {exc}") from exc
        pred = ctx.invert(pred_n[0])

        tile_w = _tile_weights(mode, layout, (r, c))
        if mode == "min":
            terrain_acc[window] = np.minimum(terrain_acc[window], pred)
        elif mode == "max":
            terrain_acc[window] = np.maximum(terrain_acc[window], pred)
        else:
            terrain_acc[window] += tile_w * pred
            weight_acc[window] += tile_w
        prob_w = np.ones_like(tile_w) if mode in ("min", "max") else tile_w
        prob_acc[window] += prob_w * prob[0]
        prob_weight[window] += prob_w

    if mode in ("min", "max"):
        terrain = terrain_acc
    else:
        terrain = terrain_acc / np.maximum(weight_acc, 1e-300)
    prob_out = prob_acc / np.maximum(prob_weight, 1e-300)
    return dsm.with_values(terrain.astype(np.float64)), dsm.with_values(prob_out)
