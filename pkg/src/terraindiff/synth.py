"""Procedural paired (DSM, DTM, ground mask) scenes for training and tests.

The terrain is a seeded sum of oriented cosine waves whose amplitude
spectrum is controlled by a roughness knob. Above-ground structure comes
from axis-aligned box extrusions (buildings) and clamped Gaussian blobs
(trees), both strictly additive, so dsm >= dtm everywhere and the ground
mask is exactly the set of untouched pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Grid, Mask


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    size: int = 64
    pixel_size: float = 1.0
    terrain_roughness: float = 0.5
    building_count: int = 6
    tree_count: int = 10
    max_building_height: float = 12.0
    max_tree_height: float = 8.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.size < 16:
            raise ValueError("scene size must be >= 16")
        if self.pixel_size <= 0:
            raise ValueError("pixel_size must be > 0")
        if not (0.0 <= self.terrain_roughness <= 1.0):
            raise ValueError("terrain_roughness must be in [0, 1]")
        if self.building_count < 0 or self.tree_count < 0:
            raise ValueError("structure counts must be >= 0")
        if self.max_building_height < 0 or self.max_tree_height < 0:
            raise ValueError("structure heights must be >= 0")


def _fractal_ground(rng: np.random.Generator, size: int, roughness: float) -> np.ndarray:
    """Smooth seeded terrain from summed oriented cosines."""
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    z = np.zeros((size, size), dtype=np.float64)
    persistence = 0.25 + 0.5 * roughness
    amplitude = 1.0
    for octave in range(4):
        wavelength = size / (1.5 * 2.0**octave)
        for _ in range(2):
            angle = rng.uniform(0.0, np.pi)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            k = 2.0 * np.pi / wavelength
            z += amplitude * np.cos(k * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
        amplitude *= persistence
    relief = 1.5 + 8.0 * roughness
    z *= relief / max(z.max() - z.min(), 1e-9)
    z += rng.uniform(0.0, 40.0)
    return z


def _add_buildings(rng, dsm: np.ndarray, dtm: np.ndarray, count: int, max_height: float) -> None:
    size = dsm.shape[0]
    max_side = max(4, size // 8)
    for _ in range(count):
        w = int(rng.integers(3, max_side + 1))
        h = int(rng.integers(3, max_side + 1))
        r0 = int(rng.integers(0, size - h + 1))
        c0 = int(rng.integers(0, size - w + 1))
        height = float(rng.uniform(0.3, 1.0)) * max_height
        if height <= 0:
            continue
        footprint = np.s_[r0 : r0 + h, c0 : c0 + w]
        roof = dtm[footprint].max() + height
        dsm[footprint] = np.maximum(dsm[footprint], roof)


def _add_trees(rng, dsm: np.ndarray, dtm: np.ndarray, count: int, max_height: float) -> None:
    size = dsm.shape[0]
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    for _ in range(count):
        cy = rng.uniform(0, size)
        cx = rng.uniform(0, size)
        sigma = rng.uniform(1.0, max(1.5, size / 20.0))
        height = float(rng.uniform(0.3, 1.0)) * max_height
        if height <= 0:
            continue
        canopy = height * np.exp(-0.5 * (((yy - cy) / sigma) ** 2 + ((xx - cx) / sigma) ** 2))
        canopy[canopy < 0.08 * height] = 0.0  # clamp tails so the footprint is compact
        dsm[:] = np.maximum(dsm, dtm + canopy)


def generate(spec: SceneSpec) -> tuple[Grid, Grid, Mask]:
    """Deterministically generate a (dsm, dtm, ground mask) triplet.

    The mask marks pixels untouched by any structure (before optional
    sensor noise), i.e. exactly where dsm == dtm by construction.
    """
    rng = np.random.default_rng(spec.seed)
    dtm = _fractal_ground(rng, spec.size, spec.terrain_roughness)
    dsm = dtm.copy()
    _add_buildings(rng, dsm, dtm, spec.building_count, spec.max_building_height)
    _add_trees(rng, dsm, dtm, spec.tree_count, spec.max_tree_height)
    ground = dsm == dtm
    if spec.noise_sigma > 0:
        dsm = dsm + rng.normal(0.0, spec.noise_sigma, dsm.shape)
    dsm32 = dsm.astype(np.float32)
    dtm32 = dtm.astype(np.float32)
    return (
        Grid(dsm32, pixel_size=spec.pixel_size),
        Grid(dtm32, pixel_size=spec.pixel_size),
        Mask(ground),
    )


def scene_stats(dsm: Grid, dtm: Grid, ground: Mask) -> dict:
    residual = dsm.values - dtm.values
    return {
        "size": dsm.width,
        "non_ground_fraction": float(1.0 - ground.bits.mean()),
        "max_structure_height": float(residual.max()),
        "terrain_min": float(dtm.values.min()),
        "terrain_max": float(dtm.values.max()),
    }
