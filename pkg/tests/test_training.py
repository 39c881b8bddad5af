import numpy as np
import pytest

from terraindiff.denoiser import ArchSpec, init_model
from terraindiff.grid import Grid, Mask, ground_mask
from terraindiff.schedule import make_cosine_schedule
from terraindiff.synth import SceneSpec, generate
from terraindiff.training import (
    IDENTITY_AUGMENT,
    AugmentConfig,
    DivergenceError,
    GeomTransform,
    OptimizerState,
    TrainConfig,
    adamw_step,
    apply_transform,
    augment,
    corpus_statistics,
    fit,
    lr_at,
    norm_context,
    train_step,
)

TINY = ArchSpec(base_channels=4, depth=1, timestep_embed_dim=8)


def scene_pair(seed=0, size=32):
    dsm, dtm, _ = generate(SceneSpec(seed=seed, size=size, building_count=3, tree_count=4))
    return dsm, dtm


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def reference_adamw(params, grads, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
    """Element-by-element reference loop, written independently of the
    vectorized implementation."""
    p = params.astype(np.float64).copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for step, g in enumerate(grads, start=1):
        for i in range(p.size):
            m[i] = beta1 * m[i] + (1 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1 - beta2) * g[i] * g[i]
            m_hat = m[i] / (1 - beta1**step)
            v_hat = v[i] / (1 - beta2**step)
            p[i] = p[i] * (1 - lr * wd)
            p[i] = p[i] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p


def test_adamw_matches_reference_loop():
    rng = np.random.default_rng(0)
    params = rng.standard_normal(40)
    grads = [rng.standard_normal(40) for _ in range(5)]
    expected = reference_adamw(params, grads, lr=1e-3, wd=0.01)

    p = params.copy()
    state = OptimizerState.fresh(40)
    for g in grads:
        p = adamw_step(p, g, state, lr=1e-3, weight_decay=0.01)
    np.testing.assert_allclose(p, expected, atol=1e-12, rtol=0)


def test_adamw_zero_grad_zero_decay_is_identity():
    rng = np.random.default_rng(1)
    params = rng.standard_normal(16)
    state = OptimizerState.fresh(16)
    out = adamw_step(params, np.zeros(16), state, lr=1e-3, weight_decay=0.0)
    np.testing.assert_array_equal(out, params)


def test_adamw_decay_only_shrinks_norm():
    rng = np.random.default_rng(2)
    params = rng.standard_normal(16)
    state = OptimizerState.fresh(16)
    out = adamw_step(params, np.zeros(16), state, lr=1e-2, weight_decay=0.5)
    assert np.linalg.norm(out) < np.linalg.norm(params)


# ---------------------------------------------------------------------------
# learning rate
# ---------------------------------------------------------------------------


def test_lr_schedule_endpoints():
    cfg = TrainConfig(lr=3e-4, warmup_steps=100, horizon_steps=1000)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(100, cfg) == pytest.approx(3e-4)
    assert lr_at(1000, cfg) == 0.0
    assert lr_at(50, cfg) == pytest.approx(1.5e-4)
    mid = lr_at(550, cfg)
    assert 0 < mid < 3e-4
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def test_augment_identity_when_disabled():
    dsm, dtm = scene_pair(3)
    m = Mask(np.isfinite(dsm.values))
    a_s, a_g, a_m = augment(dsm, dtm, m, np.random.default_rng(0), IDENTITY_AUGMENT, patch=32)
    np.testing.assert_array_equal(a_s.values, dsm.values)
    np.testing.assert_array_equal(a_g.values, dtm.values)
    np.testing.assert_array_equal(a_m.bits, m.bits)


def test_half_turn_applied_twice_is_original():
    rng = np.random.default_rng(4)
    v = rng.standard_normal((16, 16))
    tr = GeomTransform(rot_quarters=2)
    once = apply_transform(v, tr, patch=16)
    twice = apply_transform(once, tr, patch=16)
    np.testing.assert_array_equal(twice, v)


def test_quarter_rotation_commutes_with_ground_mask():
    rng = np.random.default_rng(5)
    s = Grid(rng.uniform(0, 5, (16, 16)))
    g = Grid(rng.uniform(0, 5, (16, 16)))
    tr = GeomTransform(rot_quarters=1)
    rotated_mask = ground_mask(
        Grid(apply_transform(s.values, tr, 16)), Grid(apply_transform(g.values, tr, 16)), 0.5
    )
    mask_rotated = apply_transform(ground_mask(s, g, 0.5).bits, tr, 16, is_mask=True)
    np.testing.assert_array_equal(rotated_mask.bits, mask_rotated)


def test_augment_applies_identical_transform_to_all_rasters():
    dsm, dtm = scene_pair(6)
    m = Mask(np.isfinite(dsm.values))
    aug = AugmentConfig()  # all steps at p=0.5
    for seed in range(5):
        a_s, a_g, a_m = augment(dsm, dtm, m, np.random.default_rng(seed), aug, patch=32)
        assert a_s.shape == a_g.shape == a_m.shape == (32, 32)
        # structures only ever raise the surface, and interpolation cannot
        # flip that ordering since both rasters share the transform
        ok = a_m.bits
        assert np.all(a_s.values[ok] - a_g.values[ok] >= -1e-6)


def test_jitter_rotation_marks_swept_corners_invalid():
    dsm, dtm = scene_pair(7)
    m = Mask(np.ones((32, 32), dtype=bool))
    aug = AugmentConfig(p_rotate=1.0, jitter_deg=5.0, p_scale=0.0, p_crop=0.0, p_flip_h=0.0, p_flip_v=0.0)
    rng = np.random.default_rng(3)
    a_s, a_g, a_m = augment(dsm, dtm, m, rng, aug, patch=32)
    assert not a_m.bits.all()
    assert np.isfinite(a_s.values[a_m.bits]).all()


def test_augment_range_stays_within_convex_hull():
    dsm, dtm = scene_pair(8)
    m = Mask(np.ones((32, 32), dtype=bool))
    lo, hi = dsm.values.min(), dsm.values.max()
    for seed in range(5):
        a_s, _, a_m = augment(dsm, dtm, m, np.random.default_rng(seed), AugmentConfig(), patch=32)
        vals = a_s.values[a_m.bits]
        assert vals.min() >= lo - 1e-6 and vals.max() <= hi + 1e-6


# ---------------------------------------------------------------------------
# normalization strategies
# ---------------------------------------------------------------------------


def test_norm_context_minmax_roundtrip():
    rng = np.random.default_rng(9)
    s = rng.uniform(10, 60, (8, 8))
    g = rng.uniform(5, 40, (8, 8))
    valid = np.ones((8, 8), dtype=bool)
    ctx = norm_context("minmax", s, g, valid)
    s_n = ctx.apply(s, valid)
    assert s_n.min() >= -1 and s_n.max() <= 1
    np.testing.assert_allclose(ctx.invert(s_n), s, rtol=1e-12)


def test_norm_context_constant_raster_fallback():
    s = np.full((4, 4), 5.0)
    valid = np.ones((4, 4), dtype=bool)
    ctx = norm_context("minmax", s, None, valid)
    np.testing.assert_allclose(ctx.invert(ctx.apply(s, valid)), 5.0)


def test_norm_context_zscore_and_meanshift():
    rng = np.random.default_rng(10)
    scenes = [(Grid(rng.uniform(0, 50, (8, 8))), Grid(rng.uniform(0, 40, (8, 8)))) for _ in range(3)]
    stats = corpus_statistics(scenes)
    s = scenes[0][0].values
    valid = np.ones((8, 8), dtype=bool)
    z = norm_context("zscore", s, None, valid, corpus_stats=stats)
    np.testing.assert_allclose(z.invert(z.apply(s, valid)), s, rtol=1e-12)
    m = norm_context("meanshift", s, None, valid)
    shifted = m.apply(s, valid)
    assert abs(shifted.mean()) < 1e-9
    with pytest.raises(ValueError):
        norm_context("zscore", s, None, valid)  # stats required


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------


def small_cfg(**kw):
    defaults = dict(
        patch=16, batch_size=4, microbatch=4, T=4, warmup_steps=10,
        horizon_steps=200, max_steps=200, augment=IDENTITY_AUGMENT, seed=0,
    )
    defaults.update(kw)
    return TrainConfig(**defaults)


def tiny_batch(n=4, size=16):
    return [scene_pair(seed=i, size=size) for i in range(n)]


def test_train_step_zero_lr_keeps_parameters():
    cfg = small_cfg(lr=0.0, warmup_steps=1)
    model = init_model(TINY, seed=0)
    sched = make_cosine_schedule(T=cfg.T)
    opt = OptimizerState.fresh(model.params.size)
    opt.step = 5  # past warmup, lr still 0 because cfg.lr is 0
    before = model.params.copy()
    bd, model2 = train_step(model, tiny_batch(), sched, cfg, opt, np.random.default_rng(0))
    assert np.isfinite(bd.total)
    np.testing.assert_array_equal(model2.params, before)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # deliberate overflow
def test_train_step_divergence_raises():
    cfg = small_cfg()
    model = init_model(TINY, seed=0)
    bad = model.with_params(np.full_like(model.params, 1e30))
    sched = make_cosine_schedule(T=cfg.T)
    opt = OptimizerState.fresh(model.params.size)
    with pytest.raises(DivergenceError, match="divergence"):
        train_step(bad, tiny_batch(), sched, cfg, opt, np.random.default_rng(0))


def test_overfit_single_batch_reduces_loss():
    cfg = small_cfg(lr=3e-3, warmup_steps=5, horizon_steps=500, max_steps=500)
    model = init_model(TINY, seed=1)
    sched = make_cosine_schedule(T=cfg.T)
    opt = OptimizerState.fresh(model.params.size)
    batch = tiny_batch()
    rng = np.random.default_rng(1)
    first = None
    last = None
    for _ in range(60):
        bd, model = train_step(model, batch, sched, cfg, opt, rng)
        if first is None:
            first = bd.total
        last = bd.total
    assert last < first


def test_fit_is_deterministic():
    scenes = tiny_batch(6)
    cfg = small_cfg(max_steps=4, max_epochs=3, early_stop_patience=10)
    r1 = fit(init_model(TINY, seed=2), scenes[:4], scenes[4:], cfg)
    r2 = fit(init_model(TINY, seed=2), scenes[:4], scenes[4:], cfg)
    assert r1.log == r2.log
    np.testing.assert_array_equal(r1.model.params, r2.model.params)


def test_fit_patience_zero_stops_after_first_validation():
    scenes = tiny_batch(6)
    cfg = small_cfg(max_steps=50, max_epochs=50, early_stop_patience=0)
    result = fit(init_model(TINY, seed=3), scenes[:4], scenes[4:], cfg)
    evals = [row for row in result.log if "val_rmse" in row]
    assert len(evals) == 1


def test_fit_rejects_empty_sets():
    with pytest.raises(ValueError):
        fit(init_model(TINY, seed=0), [], tiny_batch(1), small_cfg())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(normalization="nope")
