"""Four-term training objective with mask-aware mean reductions.

    total = w1 * mean|d| + w2 * mean d^2
          + w_grad * mean | |grad(pred)| - |grad(truth)| |
          + w_conf * mean BCE(sigmoid(logits), ground labels)

All means run over valid pixels only, so patch size never rescales the
weights. Analytic gradients with respect to the prediction and the logits
are exposed for the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Grid, Mask, grad_values


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda_grad: float = 0.1
    lambda_c: float = 0.1

    def __post_init__(self):
        ws = (self.lambda1, self.lambda2, self.lambda_grad, self.lambda_c)
        if any(w < 0 for w in ws):
            raise ValueError("loss weights must be non-negative")
        if not any(w > 0 for w in ws):
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    l1: float
    l2: float
    lgrad: float
    lc: float
    total: float


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Grid) else np.asarray(x)


def _bits(m) -> np.ndarray:
    return m.bits if isinstance(m, Mask) else np.asarray(m, dtype=bool)


def _valid_count(bits: np.ndarray) -> int:
    n = int(bits.sum())
    if n == 0:
        raise ValueError("empty mask")
    return n


def regression_losses(g_hat, g, m) -> tuple[float, float]:
    """(mean absolute error, mean squared error) over valid pixels."""
    gh, gt, bits = _values(g_hat), _values(g), _bits(m)
    n = _valid_count(bits)
    d = np.where(bits, gh - gt, 0.0)
    return float(np.abs(d).sum() / n), float((d * d).sum() / n)


def grad_loss(g_hat, g, m, pixel_size: float = 1.0) -> float:
    """Mean absolute difference of gradient magnitudes over valid pixels."""
    gh, gt, bits = _values(g_hat), _values(g), _bits(m)
    if gh.shape[0] < 2 or gh.shape[1] < 2:
        raise ValueError("gradient loss needs at least a 2x2 raster")
    if isinstance(g_hat, Grid):
        pixel_size = g_hat.pixel_size
    n = _valid_count(bits)
    mag_h = _grad_mag(gh, pixel_size)
    mag_t = _grad_mag(gt, pixel_size)
    return float((np.abs(mag_h - mag_t) * bits).sum() / n)


def _grad_mag(v: np.ndarray, pixel_size: float) -> np.ndarray:
    dx, dy = grad_values(v, pixel_size)
    return np.sqrt(dx * dx + dy * dy)


def confidence_loss(logits, m_alpha, m) -> float:
    """Mean binary cross-entropy of sigmoid(logits) against ground labels,
    in the saturation-safe form max(l,0) - l*y + log(1 + exp(-|l|))."""
    lg, labels, bits = _values(logits), _bits(m_alpha).astype(np.float64), _bits(m)
    n = _valid_count(bits)
    bce = np.maximum(lg, 0.0) - lg * labels + np.log1p(np.exp(-np.abs(lg)))
    return float((bce * bits).sum() / n)


def total_loss(g_hat, g, logits, m_alpha, m, w: LossWeights = LossWeights()) -> LossBreakdown:
    l1, l2 = regression_losses(g_hat, g, m)
    lgrad = grad_loss(g_hat, g, m) if w.lambda_grad > 0 else 0.0
    lc = confidence_loss(logits, m_alpha, m) if w.lambda_c > 0 else 0.0
    total = w.lambda1 * l1 + w.lambda2 * l2 + w.lambda_grad * lgrad + w.lambda_c * lc
    return LossBreakdown(l1, l2, lgrad, lc, total)


# ---------------------------------------------------------------------------
# analytic gradients
# ---------------------------------------------------------------------------


def _grad_values_adjoint(g_dx: np.ndarray, g_dy: np.ndarray, pixel_size: float) -> np.ndarray:
    """Adjoint of the forward-difference stencil with edge replication."""
    h, w = g_dx.shape
    out = np.zeros((h, w), dtype=np.float64)
    if w >= 2:
        gd = g_dx[:, :-1].copy()
        gd[:, -1] += g_dx[:, -1]  # last column reuses the previous difference
        out[:, 1:] += gd / pixel_size
        out[:, :-1] -= gd / pixel_size
    if h >= 2:
        gd = g_dy[:-1, :].copy()
        gd[-1, :] += g_dy[-1, :]
        out[1:, :] += gd / pixel_size
        out[:-1, :] -= gd / pixel_size
    return out


def total_loss_grad(
    g_hat, g, logits, m_alpha, m, w: LossWeights = LossWeights(), pixel_size: float = 1.0
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Loss breakdown plus d(total)/d(prediction) and d(total)/d(logits)."""
    gh, gt, lg = _values(g_hat), _values(g), _values(logits)
    labels, bits = _bits(m_alpha).astype(np.float64), _bits(m)
    if isinstance(g_hat, Grid):
        pixel_size = g_hat.pixel_size
    n = _valid_count(bits)

    d = np.where(bits, gh - gt, 0.0)
    l1 = float(np.abs(d).sum() / n)
    l2 = float((d * d).sum() / n)
    d_ghat = (w.lambda1 * np.sign(d) + w.lambda2 * 2.0 * d) * bits / n

    lgrad = 0.0
    if w.lambda_grad > 0:
        dx_h, dy_h = grad_values(gh, pixel_size)
        dx_t, dy_t = grad_values(gt, pixel_size)
        mag_h = np.sqrt(dx_h * dx_h + dy_h * dy_h)
        mag_t = np.sqrt(dx_t * dx_t + dy_t * dy_t)
        err = mag_h - mag_t
        lgrad = float((np.abs(err) * bits).sum() / n)
        d_mag = np.sign(err) * bits / n
        safe = np.where(mag_h > 0, mag_h, 1.0)
        d_ghat = d_ghat + w.lambda_grad * _grad_values_adjoint(
            d_mag * dx_h / safe, d_mag * dy_h / safe, pixel_size
        )

    lc = 0.0
    d_logits = np.zeros_like(lg, dtype=np.float64)
    if w.lambda_c > 0:
        bce = np.maximum(lg, 0.0) - lg * labels + np.log1p(np.exp(-np.abs(lg)))
        lc = float((bce * bits).sum() / n)
        e = np.exp(-np.abs(lg))
        sig = np.where(lg >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        d_logits = w.lambda_c * (sig - labels) * bits / n

    total = w.lambda1 * l1 + w.lambda2 * l2 + w.lambda_grad * lgrad + w.lambda_c * lc
    return LossBreakdown(l1, l2, lgrad, lc, total), d_ghat, d_logits
