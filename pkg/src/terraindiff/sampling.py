"""Reverse diffusion: initialization modes, the posterior update, and the
full generation loop.

The chain state g_t is pulled toward the gated terrain estimate with

    mean  = beta_t * sqrt(ab[t-1]) / (1 - ab[t])     * estimate
          + (1 - ab[t-1]) * sqrt(alpha_t) / (1 - ab[t]) * g_t
    var   = beta_t * (1 - ab[t-1]) / (1 - ab[t])

where ab is the cumulative alpha product with ab[0] = 1, making the final
step deterministic and equal to the estimate itself.

When the number of generation steps differs from the trained step count,
levels are mapped onto the schedule by ceil-spaced stride, each update uses
its actual predecessor level, and the last update always lands on level 0;
with matching counts this reduces exactly to the literal per-step update.

RNG contract: one standard-normal field is drawn per stochastic update;
deterministic updates (the final one, and repeated levels when the step
count exceeds the trained count) draw nothing, so equal seeds give
bit-identical outputs and extra steps beyond the trained count change
nothing at all.
"""

from __future__ import annotations

import math

import numpy as np

from .denoiser import DenoiserModel, gated_predict_batch, sigmoid_values
from .grid import Grid, NormParams, denormalize
from .schedule import DiffusionSchedule

INIT_MODES = ("gaussian_noise", "dsm", "noisy_dsm", "prior_dtm")


def init_state(
    mode: str, dsm: Grid, rng: np.random.Generator, prior: Grid | None = None
) -> Grid:
    """Starting point of the reverse chain, in the normalized domain."""
    if mode == "gaussian_noise":
        return dsm.with_values(rng.standard_normal(dsm.shape).astype(dsm.values.dtype))
    if mode == "dsm":
        return dsm
    if mode == "noisy_dsm":
        noise = rng.standard_normal(dsm.shape)
        return dsm.with_values((dsm.values + noise).astype(dsm.values.dtype))
    if mode == "prior_dtm":
        if prior is None:
            raise ValueError("prior_dtm init needs a prior terrain raster")
        if prior.shape != dsm.shape:
            raise ValueError(f"prior shape {prior.shape} does not match raster {dsm.shape}")
        return prior
    raise ValueError(f"unknown init mode {mode!r}; expected one of {INIT_MODES}")


def _step_coefficients(sched: DiffusionSchedule, t_hi: int, t_lo: int) -> tuple[float, float, float]:
    """(estimate coefficient, state coefficient, noise scale) for one update
    from level t_hi down to t_lo. Consecutive levels use the schedule's
    stored beta/alpha tables verbatim."""
    ab_hi = sched.alpha_bar[t_hi]
    ab_lo = sched.alpha_bar[t_lo]
    if t_lo == t_hi - 1:
        beta = sched.beta[t_hi]
        alpha = sched.alpha[t_hi]
    else:
        beta = 1.0 - ab_hi / ab_lo
        alpha = ab_hi / ab_lo
    c_est = beta * np.sqrt(ab_lo) / (1.0 - ab_hi)
    c_state = (1.0 - ab_lo) * np.sqrt(alpha) / (1.0 - ab_hi)
    sigma = np.sqrt(beta * (1.0 - ab_lo) / (1.0 - ab_hi))
    return float(c_est), float(c_state), float(sigma)


def posterior_step(
    sched: DiffusionSchedule,
    model: DenoiserModel,
    g_t: Grid,
    dsm: Grid,
    t: int,
    eps: Grid,
) -> Grid:
    """One literal reverse update from level t to t-1 with supplied noise."""
    sched.check_step(t)
    est, _ = gated_predict_batch(
        model, g_t.values[None], dsm.values[None], np.array([t]), t_max=sched.T
    )
    if t == 1:
        return g_t.with_values(est[0])
    c_est, c_state, sigma = _step_coefficients(sched, t, t - 1)
    out = c_est * est[0] + c_state * g_t.values + sigma * eps.values
    return g_t.with_values(out.astype(g_t.values.dtype))


def generation_levels(T: int, T_r: int) -> list[int]:
    """Descending schedule levels for T_r updates: ceil(k * T / T_r)."""
    if T_r < 1:
        raise ValueError("T_r must be >= 1")
    return [math.ceil(k * T / T_r) for k in range(T_r, 0, -1)]


def sample_batch(
    sched: DiffusionSchedule,
    model: DenoiserModel,
    dsm: np.ndarray,
    mode: str,
    T_r: int,
    rng: np.random.Generator,
    prior: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched generation over (N, H, W) normalized surface rasters.

    Returns the terrain estimates and the ground probabilities from the
    final denoiser call.
    """
    n = dsm.shape[0]
    dtype = dsm.dtype
    if mode == "gaussian_noise":
        state = rng.standard_normal(dsm.shape).astype(dtype)
    elif mode == "dsm":
        state = dsm.copy()
    elif mode == "noisy_dsm":
        state = (dsm + rng.standard_normal(dsm.shape)).astype(dtype)
    elif mode == "prior_dtm":
        if prior is None:
            raise ValueError("prior_dtm init needs a prior terrain raster")
        if prior.shape != dsm.shape:
            raise ValueError(f"prior shape {prior.shape} does not match raster {dsm.shape}")
        state = prior.astype(dtype)
    else:
        raise ValueError(f"unknown init mode {mode!r}; expected one of {INIT_MODES}")

    levels = generation_levels(sched.T, T_r)
    prob = np.full(dsm.shape, 0.5, dtype=np.float64)
    for i, t_hi in enumerate(levels):
        t_lo = levels[i + 1] if i + 1 < len(levels) else 0
        t_vec = np.full(n, t_hi)
        est, logits = gated_predict_batch(model, state, dsm, t_vec, t_max=sched.T)
        if t_lo == 0:
            state = est.astype(dtype)
            prob = sigmoid_values(logits)
        else:
            c_est, c_state, sigma = _step_coefficients(sched, t_hi, t_lo)
            noise = sigma * rng.standard_normal(dsm.shape) if sigma > 0 else 0.0
            state = (c_est * est + c_state * state + noise).astype(dtype)
    return state, prob


def sample(
    sched: DiffusionSchedule,
    model: DenoiserModel,
    dsm: Grid,
    mode: str,
    T_r: int,
    rng: np.random.Generator,
    prior: Grid | None = None,
    norm: NormParams | None = None,
) -> tuple[Grid, Grid]:
    """Generate a terrain raster from a normalized surface raster.

    With ``norm`` supplied, the terrain comes back denormalized to meters;
    the ground-probability raster is always in [0, 1].
    """
    terrain, prob = sample_batch(
        sched,
        model,
        dsm.values[None],
        mode,
        T_r,
        rng,
        prior=None if prior is None else prior.values[None],
    )
    out = dsm.with_values(terrain[0])
    if norm is not None:
        out = denormalize(out, norm)
    return out, dsm.with_values(prob[0].astype(np.float64))
