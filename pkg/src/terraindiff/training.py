"""Training loop: corrupt clean terrain, run the gated denoiser, optimize
the four-term objective with decoupled-weight-decay Adam under a
warmup-cosine learning rate, with geometric augmentation and early stopping
on validation RMSE of full reverse sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sampling
from .denoiser import DenoiserModel, gated_predict_batch, sigmoid_values
from .grid import Grid, Mask, norm_context
from .losses import LossBreakdown, LossWeights, total_loss_grad
from .resample import resize_bilinear, resize_nearest, rotate_bilinear, rotate_nearest
from .schedule import DiffusionSchedule, make_schedule


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    """Each geometric step fires independently with its own probability."""

    p_rotate: float = 0.5
    jitter_deg: float = 5.0
    p_scale: float = 0.5
    scales: tuple[int, ...] = (1, 2, 4)
    p_crop: float = 0.5
    p_flip_h: float = 0.5
    p_flip_v: float = 0.5


IDENTITY_AUGMENT = AugmentConfig(p_rotate=0.0, p_scale=0.0, p_crop=0.0, p_flip_h=0.0, p_flip_v=0.0)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    warmup_steps: int = 500
    horizon_steps: int = 5000
    max_epochs: int = 1000
    max_steps: int = 5000
    batch_size: int = 16
    microbatch: int = 8
    T: int = 10
    schedule_family: str = "beta-cosine"
    alpha: float = 0.25
    patch: int = 64
    seed: int = 0
    early_stop_patience: int = 10
    validate_every_epochs: int = 1
    loss_weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    normalization: str = "minmax"
    init_mode: str = "noisy_dsm"
    diffusion: bool = True

    def __post_init__(self):
        if self.lr < 0 or min(self.batch_size, self.T, self.patch) <= 0:
            raise ValueError("config values must be positive")
        if self.normalization not in ("minmax", "zscore", "meanshift"):
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def fresh(cls, n_params: int, dtype=np.float64) -> "OptimizerState":
        return cls(np.zeros(n_params, dtype=dtype), np.zeros(n_params, dtype=dtype))


def adamw_step(
    params: np.ndarray,
    grad: np.ndarray,
    state: OptimizerState,
    lr: float,
    weight_decay: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> np.ndarray:
    """One bias-corrected update with decoupled weight decay; mutates
    ``state`` and returns the new parameter vector."""
    state.step += 1
    g = grad.astype(state.m.dtype)
    state.m = beta1 * state.m + (1.0 - beta1) * g
    state.v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = state.m / (1.0 - beta1**state.step)
    v_hat = state.v / (1.0 - beta2**state.step)
    p = params.astype(state.m.dtype)
    p = p * (1.0 - lr * weight_decay)
    p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p.astype(params.dtype)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.lr, then cosine decay to zero at the horizon."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if step >= cfg.horizon_steps:
        return 0.0
    span = max(cfg.horizon_steps - cfg.warmup_steps, 1)
    frac = (step - cfg.warmup_steps) / span
    return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * frac))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeomTransform:
    rot_quarters: int = 0
    jitter_deg: float = 0.0
    scale: int = 1
    crop: tuple[int, int] | None = None
    flip_h: bool = False
    flip_v: bool = False


def draw_transform(rng: np.random.Generator, aug: AugmentConfig, in_size: int, patch: int) -> GeomTransform:
    rot = 0
    jitter = 0.0
    if rng.random() < aug.p_rotate:
        rot = int(rng.integers(0, 4))
        jitter = float(rng.uniform(-aug.jitter_deg, aug.jitter_deg))
    scale = 1
    if rng.random() < aug.p_scale:
        scale = int(aug.scales[rng.integers(0, len(aug.scales))])
    crop = None
    scaled = in_size * scale
    if scaled > patch and rng.random() < aug.p_crop:
        crop = (int(rng.integers(0, scaled - patch + 1)), int(rng.integers(0, scaled - patch + 1)))
    flip_h = rng.random() < aug.p_flip_h
    flip_v = rng.random() < aug.p_flip_v
    return GeomTransform(rot, jitter, scale, crop, flip_h, flip_v)


def apply_transform(values: np.ndarray, tr: GeomTransform, patch: int, is_mask: bool = False) -> np.ndarray:
    out = np.asarray(values)
    if tr.rot_quarters:
        out = np.rot90(out, k=tr.rot_quarters)
    if tr.jitter_deg:
        out = rotate_nearest(out, tr.jitter_deg, fill=False) if is_mask else rotate_bilinear(out, tr.jitter_deg)
    if tr.scale != 1:
        size = out.shape[0] * tr.scale
        out = resize_nearest(out, size, size) if is_mask else resize_bilinear(out, size, size)
    if tr.crop is not None:
        r, c = tr.crop
        out = out[r : r + patch, c : c + patch]
    if tr.flip_h:
        out = out[:, ::-1]
    if tr.flip_v:
        out = out[::-1, :]
    if out.shape != (patch, patch):
        out = resize_nearest(out, patch, patch) if is_mask else resize_bilinear(out, patch, patch)
    return np.ascontiguousarray(out)


def augment(
    dsm: Grid, dtm: Grid, m: Mask, rng: np.random.Generator,
    aug: AugmentConfig = AugmentConfig(), patch: int | None = None,
) -> tuple[Grid, Grid, Mask]:
    """One identical geometric transform applied to all three rasters.

    Elevations are resampled bilinearly, masks nearest; pixels rotated in
    from outside the raster become invalid.
    """
    patch = patch or dsm.width
    tr = draw_transform(rng, aug, dsm.width, patch)
    s_v = apply_transform(dsm.values, tr, patch)
    g_v = apply_transform(dtm.values, tr, patch)
    m_v = apply_transform(m.bits, tr, patch, is_mask=True)
    m_v = m_v & np.isfinite(s_v) & np.isfinite(g_v)
    return dsm.with_values(s_v), dtm.with_values(g_v), Mask(m_v)


def corpus_statistics(scenes: list[tuple[Grid, Grid]]) -> tuple[float, float]:
    """Mean and standard deviation over all valid pixels of both rasters."""
    chunks = []
    for s, g in scenes:
        valid = np.isfinite(s.values) & np.isfinite(g.values)
        chunks.append(s.values[valid])
        chunks.append(g.values[valid])
    pool = np.concatenate(chunks)
    return float(pool.mean()), float(pool.std())


# ---------------------------------------------------------------------------
# steps and epochs
# ---------------------------------------------------------------------------


def prepare_batch(
    scenes: list[tuple[Grid, Grid]],
    cfg: TrainConfig,
    rng: np.random.Generator,
    corpus_stats: tuple[float, float] | None = None,
):
    """Augment and normalize a batch; returns stacked arrays plus masks."""
    s_list, g_list, valid_list, label_list = [], [], [], []
    for dsm, dtm in scenes:
        valid = Mask(np.isfinite(dsm.values) & np.isfinite(dtm.values))
        a_s, a_g, a_m = augment(dsm, dtm, valid, rng, cfg.augment, cfg.patch)
        ctx = norm_context(cfg.normalization, a_s.values, a_g.values, a_m.bits, corpus_stats)
        s_n = ctx.apply(np.nan_to_num(a_s.values), a_m.bits)
        g_n = ctx.apply(np.nan_to_num(a_g.values), a_m.bits)
        labels = (np.abs(s_n - g_n) < ctx.alpha_scaled(cfg.alpha)) & a_m.bits
        s_list.append(s_n)
        g_list.append(g_n)
        valid_list.append(a_m.bits)
        label_list.append(labels)
    return (
        np.stack(s_list).astype(np.float32),
        np.stack(g_list).astype(np.float32),
        np.stack(valid_list),
        np.stack(label_list),
    )


def train_step(
    model: DenoiserModel,
    batch: list[tuple[Grid, Grid]],
    sched: DiffusionSchedule,
    cfg: TrainConfig,
    opt: OptimizerState,
    rng: np.random.Generator,
    corpus_stats: tuple[float, float] | None = None,
) -> tuple[LossBreakdown, DenoiserModel]:
    """One optimizer update over a batch; returns the mean loss breakdown."""
    s_n, g_n, valid, labels = prepare_batch(batch, cfg, rng, corpus_stats)
    n = len(batch)
    if cfg.diffusion:
        t = rng.integers(1, cfg.T + 1, size=n)
        eps = rng.standard_normal(s_n.shape).astype(np.float32)
        ab = sched.alpha_bar[t].reshape(-1, 1, 1)
        g_t = (np.sqrt(ab) * g_n + np.sqrt(1.0 - ab) * eps).astype(np.float32)
    else:
        t = np.ones(n, dtype=np.int64)
        g_t = s_n

    grad = np.zeros_like(model.params, dtype=np.float64)
    sums = np.zeros(5)
    for lo in range(0, n, cfg.microbatch):
        hi = min(lo + cfg.microbatch, n)
        g0_hat, logits, tape = gated_predict_batch(
            model, g_t[lo:hi], s_n[lo:hi], t[lo:hi], t_max=cfg.T, record=True
        )
        d_g0 = np.zeros_like(g0_hat)
        d_logits = np.zeros_like(logits)
        for i in range(hi - lo):
            bd, dg, dl = total_loss_grad(
                g0_hat[i], g_n[lo + i], logits[i], labels[lo + i], valid[lo + i], cfg.loss_weights
            )
            d_g0[i] = dg / n
            d_logits[i] = dl / n
            sums += np.array([bd.l1, bd.l2, bd.lgrad, bd.lc, bd.total])
        grad += tape.backward(d_g0, d_logits)

    mean = sums / n
    breakdown = LossBreakdown(*mean)
    if not np.isfinite(breakdown.total):
        raise DivergenceError("divergence")

    lr = lr_at(opt.step, cfg)
    new_params = adamw_step(model.params, grad, opt, lr, cfg.weight_decay)
    return breakdown, model.with_params(new_params)


def validation_rmse(
    model: DenoiserModel,
    scenes: list[tuple[Grid, Grid]],
    sched: DiffusionSchedule,
    cfg: TrainConfig,
    seed: int,
    corpus_stats: tuple[float, float] | None = None,
    T_r: int | None = None,
) -> tuple[float, float]:
    """(RMSE in meters, total misclassification percent) of full reverse
    sampling over held-out scenes. Normalization is recovered from the
    surface raster alone, as at inference time."""
    T_r = T_r or cfg.T
    sq_sum = 0.0
    n_pix = 0
    mis = 0
    cls_n = 0
    chunk = 16
    for c0 in range(0, len(scenes), chunk):
        part = scenes[c0 : c0 + chunk]
        rng = np.random.default_rng([seed, c0])
        s_list, ctxs, valids = [], [], []
        for dsm, dtm in part:
            valid = np.isfinite(dsm.values) & np.isfinite(dtm.values)
            ctx = norm_context(cfg.normalization, dsm.values, None, np.isfinite(dsm.values), corpus_stats)
            s_list.append(ctx.apply(np.nan_to_num(dsm.values), np.isfinite(dsm.values)))
            ctxs.append(ctx)
            valids.append(valid)
        s_n = np.stack(s_list).astype(np.float32)
        if cfg.diffusion:
            pred_n, prob = sampling.sample_batch(sched, model, s_n, cfg.init_mode, T_r, rng)
        else:
            t_vec = np.ones(s_n.shape[0], dtype=np.int64)
            pred_n, logits = gated_predict_batch(model, s_n, s_n, t_vec, t_max=cfg.T)
            prob = sigmoid_values(logits)
        for i, (dsm, dtm) in enumerate(part):
            pred = ctxs[i].invert(pred_n[i])
            d = (pred - dtm.values)[valids[i]]
            sq_sum += float((d * d).sum())
            n_pix += d.size
            truth_ground = np.abs(dsm.values - dtm.values) < cfg.alpha
            pred_ground = prob[i] >= 0.5
            mis += int((pred_ground[valids[i]] != truth_ground[valids[i]]).sum())
            cls_n += int(valids[i].sum())
    return float(np.sqrt(sq_sum / n_pix)), 100.0 * mis / cls_n


@dataclass
class FitResult:
    model: DenoiserModel
    best_rmse: float
    log: list[dict]


def fit(
    model: DenoiserModel,
    train_scenes: list[tuple[Grid, Grid]],
    val_scenes: list[tuple[Grid, Grid]],
    cfg: TrainConfig,
) -> FitResult:
    """Train until the step budget, epoch cap, or early-stopping patience is
    exhausted; keeps the checkpoint with the best validation RMSE."""
    if not train_scenes or not val_scenes:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    sched = make_schedule(cfg.schedule_family, cfg.T)
    corpus_stats = corpus_statistics(train_scenes) if cfg.normalization == "zscore" else None
    opt = OptimizerState.fresh(model.params.size)

    best_params = model.params.copy()
    best_rmse = np.inf
    bad_evals = 0
    log: list[dict] = []
    step = 0
    stop = False

    batch_size = min(cfg.batch_size, len(train_scenes))
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train_scenes))
        for lo in range(0, len(order) - batch_size + 1, batch_size):
            batch = [train_scenes[i] for i in order[lo : lo + batch_size]]
            breakdown, model = train_step(model, batch, sched, cfg, opt, rng, corpus_stats)
            log.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "l1": breakdown.l1,
                    "l2": breakdown.l2,
                    "lgrad": breakdown.lgrad,
                    "lc": breakdown.lc,
                    "total": breakdown.total,
                    "lr": lr_at(opt.step - 1, cfg),
                }
            )
            step += 1
            if step >= cfg.max_steps:
                stop = True
                break
        if epoch % cfg.validate_every_epochs == 0 or stop:
            rmse, e_tot = validation_rmse(model, val_scenes, sched, cfg, cfg.seed, corpus_stats)
            log.append({"step": step, "epoch": epoch, "val_rmse": rmse, "val_e_tot": e_tot})
            if rmse < best_rmse:
                best_rmse = rmse
                best_params = model.params.copy()
                bad_evals = 0
            else:
                bad_evals += 1
                if bad_evals > cfg.early_stop_patience:
                    stop = True
            if cfg.early_stop_patience == 0:
                stop = True  # patience 0: a single evaluation ends the run
        if stop:
            break

    return FitResult(model.with_params(best_params), float(best_rmse), log)
