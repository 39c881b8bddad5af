"""Finite-difference checks for every reverse-mode op.

The oracle is a central difference of the scalar L = sum(R * op(inputs))
with a fixed random weighting R, evaluated in float64 at h = 1e-6.
"""

import numpy as np
import pytest

from terraindiff import autodiff as ad


def numeric_grad(f, x, h=1e-6):
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_op(build, arrays, atol=1e-7, rtol=1e-5):
    """build(list of Nodes) -> output Node; checks grads wrt every array."""
    rng = np.random.default_rng(0)
    nodes = [ad.leaf(a.copy()) for a in arrays]
    out = build(nodes)
    weight = rng.standard_normal(out.value.shape)
    ad.backprop([out], [weight])

    for idx, a in enumerate(arrays):
        def scalar(x, idx=idx):
            ns = [ad.leaf(arr.copy()) for arr in arrays]
            ns[idx] = ad.leaf(x)
            return float((build(ns).value * weight).sum())

        num = numeric_grad(scalar, a.copy())
        ana = nodes[idx].grad
        assert ana is not None, f"input {idx} got no gradient"
        np.testing.assert_allclose(ana, num, atol=atol, rtol=rtol)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def test_conv2d_stride1(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    check_op(lambda n: ad.conv2d(n[0], n[1], n[2], stride=1), [x, w, b])


def test_conv2d_stride2(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((5, 3, 3, 3))
    b = rng.standard_normal(5)
    check_op(lambda n: ad.conv2d(n[0], n[1], n[2], stride=2), [x, w, b])


def test_conv2d_1x1(rng):
    x = rng.standard_normal((2, 4, 5, 5))
    w = rng.standard_normal((3, 4, 1, 1))
    b = rng.standard_normal(3)
    check_op(lambda n: ad.conv2d(n[0], n[1], n[2]), [x, w, b])


def test_group_norm(rng):
    x = rng.standard_normal((2, 8, 4, 4))
    gamma = rng.standard_normal(8)
    beta = rng.standard_normal(8)
    check_op(lambda n: ad.group_norm(n[0], n[1], n[2], groups=4), [x, gamma, beta], atol=1e-6)


def test_film(rng):
    x = rng.standard_normal((3, 4, 5, 5))
    gb = rng.standard_normal((3, 8))
    check_op(lambda n: ad.film(n[0], n[1]), [x, gb])


def test_linear(rng):
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((6, 3))
    b = rng.standard_normal(3)
    check_op(lambda n: ad.linear(n[0], n[1], n[2]), [x, w, b])


def test_silu_and_sigmoid(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    check_op(lambda n: ad.silu(n[0]), [x])
    check_op(lambda n: ad.sigmoid(n[0]), [x])


def test_upsample_nearest(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    check_op(lambda n: ad.upsample_nearest(n[0]), [x])


def test_concat_channels(rng):
    a = rng.standard_normal((2, 3, 4, 4))
    b = rng.standard_normal((2, 5, 4, 4))
    check_op(lambda n: ad.concat_channels(n[0], n[1]), [a, b])


def test_attention_sdp(rng):
    q = rng.standard_normal((2, 4, 9))
    k = rng.standard_normal((2, 4, 9))
    v = rng.standard_normal((2, 4, 9))
    check_op(lambda n: ad.attention_sdp(n[0], n[1], n[2]), [q, k, v], atol=1e-6)


def test_elementwise_combo(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    check_op(lambda n: ad.mul(ad.add(n[0], n[1]), ad.sub(n[0], n[1])), [a, b])


def test_reused_node_accumulates_grad(rng):
    # y = x * x exercises fan-out: grad must be 2x, not x
    x = rng.standard_normal((4, 4))
    node = ad.leaf(x)
    out = ad.mul(node, node)
    ad.backprop([out], [np.ones_like(x)])
    np.testing.assert_allclose(node.grad, 2 * x, rtol=1e-12)


def test_two_outputs_seeded_jointly(rng):
    x = rng.standard_normal((3, 3))
    node = ad.leaf(x)
    y1 = ad.mul_const(node, 2.0)
    y2 = ad.mul(node, node)
    s1 = rng.standard_normal(x.shape)
    s2 = rng.standard_normal(x.shape)
    ad.backprop([y1, y2], [s1, s2])
    np.testing.assert_allclose(node.grad, 2.0 * s1 + 2.0 * x * s2, rtol=1e-12)
