import numpy as np
import pytest

from terraindiff.grid import Grid
from terraindiff.schedule import (
    forward_sample,
    forward_sample_values,
    make_alphabar_cosine_schedule,
    make_cosine_schedule,
    make_schedule,
)


def manual_schedule(betas):
    """Build a schedule from explicit betas by monkey-construction."""
    from terraindiff.schedule import _from_betas

    return _from_betas(np.asarray(betas, dtype=np.float64))


def test_single_step_schedule_hits_beta_max():
    sched = make_cosine_schedule(T=1, beta_min=1e-4, beta_max=0.02)
    assert sched.beta[1] == pytest.approx(0.02)


def test_constant_schedule_when_bounds_equal():
    sched = make_cosine_schedule(T=5, beta_min=0.01, beta_max=0.01)
    np.testing.assert_allclose(sched.beta[1:], 0.01)


def test_default_schedule_strictly_increasing():
    sched = make_cosine_schedule()
    b = sched.beta[1:]
    assert sched.T == 10
    assert np.all(np.diff(b) > 0)
    assert b[0] < b[-1]
    assert b[-1] == pytest.approx(0.02)


def test_alpha_bar_matches_direct_product():
    sched = make_cosine_schedule(T=10)
    direct = np.cumprod(1.0 - sched.beta[1:])
    np.testing.assert_allclose(sched.alpha_bar[1:], direct, atol=1e-12)
    assert sched.alpha_bar[0] == 1.0
    assert np.all(np.diff(sched.alpha_bar) < 0)


def test_alpha_bar_recurrence_exact():
    sched = make_cosine_schedule(T=7)
    for t in range(1, 8):
        assert sched.alpha_bar[t] == sched.alpha_bar[t - 1] * sched.alpha[t]


def test_invalid_bounds_raise():
    with pytest.raises(ValueError):
        make_cosine_schedule(T=0)
    with pytest.raises(ValueError):
        make_cosine_schedule(T=5, beta_min=0.0, beta_max=0.02)
    with pytest.raises(ValueError):
        make_cosine_schedule(T=5, beta_min=0.03, beta_max=0.02)


def test_alphabar_cosine_family_available():
    sched = make_schedule("alphabar-cosine", T=10)
    assert sched.T == 10
    assert np.all(np.diff(sched.alpha_bar) < 0)
    with pytest.raises(ValueError):
        make_schedule("nope")


# ---------------------------------------------------------------------------
# forward corruption
# ---------------------------------------------------------------------------


def test_forward_sample_hand_value():
    # betas [0.1, 0.2, 0.5] give alpha_bar [0.9, 0.72, 0.36]; with zero
    # noise at t=3 the output is sqrt(0.36) * g0 = 0.6 * g0
    sched = manual_schedule([0.1, 0.2, 0.5])
    np.testing.assert_allclose(sched.alpha_bar[1:], [0.9, 0.72, 0.36])
    g0 = Grid(np.full((3, 3), 2.0))
    eps = Grid(np.zeros((3, 3)))
    out = forward_sample(sched, g0, 3, eps)
    np.testing.assert_allclose(out.values, 1.2)


def test_forward_sample_no_corruption_limit():
    sched = manual_schedule([1e-12, 1e-12])
    g0 = Grid(np.arange(4, dtype=np.float64).reshape(2, 2))
    eps = Grid(np.ones((2, 2)))
    out = forward_sample(sched, g0, 2, eps)
    np.testing.assert_allclose(out.values, g0.values, atol=1e-5)


def test_forward_sample_pure_noise_when_g0_zero():
    sched = manual_schedule([0.1, 0.2, 0.5])
    eps = Grid(np.full((2, 2), 3.0))
    out = forward_sample(sched, Grid(np.zeros((2, 2))), 3, eps)
    np.testing.assert_allclose(out.values, np.sqrt(1 - 0.36) * 3.0)


def test_forward_sample_step_bounds():
    sched = make_cosine_schedule(T=3)
    g = Grid(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        forward_sample(sched, g, 0, g)
    with pytest.raises(ValueError):
        forward_sample(sched, g, 4, g)
    with pytest.raises(ValueError):
        forward_sample(sched, g, 1, Grid(np.zeros((3, 3))))


def test_forward_sample_monte_carlo_statistics():
    # sample mean ~ sqrt(ab)*g0 and variance ~ (1-ab), within 3 standard errors
    sched = make_cosine_schedule(T=10)
    rng = np.random.default_rng(123)
    n = 100_000
    g0_val = 0.7
    for t in (1, 5, 10):
        ab = sched.alpha_bar[t]
        eps = rng.standard_normal(n)
        samples = np.sqrt(ab) * g0_val + np.sqrt(1 - ab) * eps
        se_mean = np.sqrt((1 - ab) / n)
        assert abs(samples.mean() - np.sqrt(ab) * g0_val) < 3 * se_mean
        var = samples.var(ddof=1)
        se_var = (1 - ab) * np.sqrt(2.0 / (n - 1))
        assert abs(var - (1 - ab)) < 3 * se_var


def test_forward_sample_values_batched_matches_single():
    sched = make_cosine_schedule(T=10)
    rng = np.random.default_rng(5)
    g0 = rng.standard_normal((3, 4, 4))
    eps = rng.standard_normal((3, 4, 4))
    t = np.array([1, 5, 10])
    batched = forward_sample_values(sched, g0, t, eps)
    for i, ti in enumerate(t):
        single = forward_sample(sched, Grid(g0[i]), int(ti), Grid(eps[i]))
        np.testing.assert_allclose(batched[i], single.values)
