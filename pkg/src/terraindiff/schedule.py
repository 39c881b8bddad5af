"""Variance schedules and the forward (corruption) process.

The forward process corrupts a clean terrain raster g0 into g_t via

    g_t = sqrt(alpha_bar[t]) * g0 + sqrt(1 - alpha_bar[t]) * eps

with alpha[t] = 1 - beta[t] and alpha_bar[t] the running product of alpha.
Noise is always supplied by the caller so every draw is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Grid

DEFAULT_T = 10
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.02


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step noise levels. Arrays are 1-indexed by timestep:

    beta[t] for t in 1..T lives at beta[t]; index 0 is unused padding so
    that alpha_bar[0] == 1 holds literally.
    """

    beta: np.ndarray  # shape (T+1,), beta[0] unused
    alpha: np.ndarray  # 1 - beta
    alpha_bar: np.ndarray  # cumulative product, alpha_bar[0] == 1

    def __post_init__(self):
        b = self.beta[1:]
        if b.size < 1:
            raise ValueError("schedule needs at least one step")
        if not ((b > 0) & (b < 1)).all():
            raise ValueError("beta values must lie in (0, 1)")
        for arr in (self.beta, self.alpha, self.alpha_bar):
            arr.setflags(write=False)

    @property
    def T(self) -> int:
        return self.beta.size - 1

    def check_step(self, t: int) -> None:
        if not (1 <= t <= self.T):
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


def _from_betas(betas: np.ndarray) -> DiffusionSchedule:
    beta = np.concatenate([[np.nan], np.asarray(betas, dtype=np.float64)])
    alpha = 1.0 - beta
    alpha_bar = np.empty_like(beta)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(alpha[1:])
    return DiffusionSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def make_cosine_schedule(
    T: int = DEFAULT_T,
    beta_min: float = DEFAULT_BETA_MIN,
    beta_max: float = DEFAULT_BETA_MAX,
) -> DiffusionSchedule:
    """Beta eased from beta_min to beta_max along a cosine ramp.

    beta[t] = beta_min + (beta_max - beta_min) * (1 - cos(pi * t / T)) / 2,
    so beta[T] == beta_max exactly and the ramp is strictly increasing.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0 < beta_min <= beta_max < 1):
        raise ValueError("need 0 < beta_min <= beta_max < 1")
    t = np.arange(1, T + 1, dtype=np.float64)
    betas = beta_min + (beta_max - beta_min) * (1.0 - np.cos(np.pi * t / T)) / 2.0
    return _from_betas(betas)


def make_alphabar_cosine_schedule(T: int = DEFAULT_T, offset: float = 0.008) -> DiffusionSchedule:
    """Alternative schedule defined through a squared-cosine alpha_bar curve."""
    if T < 1:
        raise ValueError("T must be >= 1")
    steps = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((steps + offset) / (1.0 + offset) * np.pi / 2.0) ** 2
    alpha_bar = f / f[0]
    betas = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 1e-8, 0.999)
    return _from_betas(betas)


def make_schedule(
    family: str = "beta-cosine",
    T: int = DEFAULT_T,
    beta_min: float = DEFAULT_BETA_MIN,
    beta_max: float = DEFAULT_BETA_MAX,
) -> DiffusionSchedule:
    if family == "beta-cosine":
        return make_cosine_schedule(T, beta_min, beta_max)
    if family == "alphabar-cosine":
        return make_alphabar_cosine_schedule(T)
    raise ValueError(f"unknown schedule family {family!r}")


def forward_sample(sched: DiffusionSchedule, g0: Grid, t: int, eps: Grid) -> Grid:
    """Corrupt clean terrain to noise level t with the supplied draw."""
    sched.check_step(t)
    if eps.shape != g0.shape:
        raise ValueError("noise shape must match terrain shape")
    ab = sched.alpha_bar[t]
    out = np.sqrt(ab) * g0.values + np.sqrt(1.0 - ab) * eps.values
    return g0.with_values(out.astype(g0.values.dtype))


def forward_sample_values(
    sched: DiffusionSchedule, g0: np.ndarray, t: np.ndarray, eps: np.ndarray
) -> np.ndarray:
    """Batched array form: per-sample timesteps over a leading batch axis."""
    ab = sched.alpha_bar[np.asarray(t)]
    shape = (-1,) + (1,) * (g0.ndim - 1)
    ab = ab.reshape(shape)
    return np.sqrt(ab) * g0 + np.sqrt(1.0 - ab) * eps
