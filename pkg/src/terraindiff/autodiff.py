"""Minimal reverse-mode automatic differentiation over numpy arrays.

Each op builds a Node holding the forward value and a vector-Jacobian
product closure; `backprop` walks the recorded graph once in reverse
topological order. Ops cover exactly what the denoiser needs: convolution,
group normalization, featurewise affine modulation, elementwise
nonlinearities, nearest upsampling, concatenation, dense layers, and
scaled-dot-product spatial attention. Dtype follows the inputs, so the
same graph runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import numpy as np


class Node:
    __slots__ = ("value", "grad", "parents", "vjp")

    def __init__(self, value: np.ndarray, parents: tuple = (), vjp=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape


def constant(value: np.ndarray) -> Node:
    return Node(np.asarray(value))


def leaf(value: np.ndarray) -> Node:
    """Differentiable input (parameter or seeded activation)."""
    return Node(np.asarray(value))


def _accum(node: Node, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = g.copy() if g.shape == node.value.shape else np.broadcast_to(g, node.value.shape).copy()
    else:
        node.grad += g


def backprop(outputs: list[Node], seeds: list[np.ndarray]) -> None:
    """Accumulate gradients of sum(seed * output) into every reachable node."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(o, False) for o in outputs]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    for out, seed in zip(outputs, seeds):
        _accum(out, np.asarray(seed, dtype=out.value.dtype))
    for node in reversed(order):
        if node.grad is None or node.vjp is None:
            continue
        grads = node.vjp(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is not None:
                _accum(parent, g)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a: Node, b: Node) -> Node:
    return Node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    return Node(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    return Node(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def add_const(a: Node, c) -> Node:
    return Node(a.value + c, (a,), lambda g: (g,))


def mul_const(a: Node, c) -> Node:
    return Node(a.value * c, (a,), lambda g: (g * c,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # overflow-free: exp of a non-positive argument only
    e = np.exp(-np.abs(x))
    d = 1.0 + e
    return np.where(x >= 0, 1.0 / d, e / d)


def sigmoid(a: Node) -> Node:
    s = _sigmoid(a.value)
    return Node(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Node) -> Node:
    s = _sigmoid(a.value)
    return Node(a.value * s, (a,), lambda g: (g * s * (1.0 + a.value * (1.0 - s)),))


def identity(a: Node) -> Node:
    return a


# ---------------------------------------------------------------------------
# dense / embedding ops
# ---------------------------------------------------------------------------


def linear(x: Node, w: Node, b: Node) -> Node:
    """x (N, Din) @ w (Din, Dout) + b (Dout,)."""
    out = x.value @ w.value + b.value

    def vjp(g):
        return g @ w.value.T, x.value.T @ g, g.sum(axis=0)

    return Node(out, (x, w, b), vjp)


def film(x: Node, gamma_beta: Node) -> Node:
    """Per-channel affine modulation y = (1 + gamma) * x + beta.

    ``gamma_beta`` is (N, 2C): first half gamma offsets, second half betas.
    Zero modulation parameters therefore leave x unchanged.
    """
    n, c2 = gamma_beta.value.shape
    c = c2 // 2
    gamma = gamma_beta.value[:, :c].reshape(n, c, 1, 1)
    beta = gamma_beta.value[:, c:].reshape(n, c, 1, 1)
    out = (1.0 + gamma) * x.value + beta

    def vjp(g):
        dgamma = (g * x.value).sum(axis=(2, 3))
        dbeta = g.sum(axis=(2, 3))
        return g * (1.0 + gamma), np.concatenate([dgamma, dbeta], axis=1)

    return Node(out, (x, gamma_beta), vjp)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (C*kh*kw, N*OH*OW) patch matrix.

    Channel-kernel leads so the convolution is one large GEMM instead of a
    batch of small per-sample ones.
    """
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]
    n, c, oh, ow, _, _ = windows.shape
    return windows.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * oh * ow)


def conv2d(x: Node, w: Node, b: Node, stride: int = 1) -> Node:
    """Same-ish 2D convolution on NCHW with implicit zero padding.

    Padding is (k-1)//2 per side, so stride 1 preserves the spatial size
    and stride 2 halves even sizes. w is (F, C, kh, kw), b is (F,).
    """
    n, c, h, wdt = x.value.shape
    f, _, kh, kw = w.value.shape
    pad = (kh - 1) // 2
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, wdt + 2 * pad), dtype=x.value.dtype)
        xp[:, :, pad : pad + h, pad : pad + wdt] = x.value
    else:
        xp = x.value
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wdt + 2 * pad - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride)  # (CK, N*L)
    w_flat = w.value.reshape(f, -1)
    out = (w_flat @ cols).reshape(f, n, oh, ow).transpose(1, 0, 2, 3) + b.value.reshape(1, f, 1, 1)

    def vjp(g):
        gf = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n * oh * ow)
        dw = (gf @ cols.T).reshape(w.value.shape)
        db = gf.sum(axis=1)
        dcols = w_flat.T @ gf  # (CK, N*L)
        dcols = dcols.reshape(c, kh, kw, n, oh, ow)
        dxp = np.zeros_like(xp)
        dst = dxp.transpose(1, 0, 2, 3)  # (C, N, Hp, Wp) view
        for ki in range(kh):
            for kj in range(kw):
                dst[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += dcols[
                    :, ki, kj
                ]
        dx = dxp[:, :, pad : pad + h, pad : pad + wdt] if pad else dxp
        return dx, dw, db

    return Node(out, (x, w, b), vjp)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def group_norm(x: Node, gamma: Node, beta: Node, groups: int, eps: float = 1e-5) -> Node:
    n, c, h, w = x.value.shape
    if c % groups:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    xg = x.value.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv_std).reshape(n, c, h, w)
    out = xhat * gamma.value.reshape(1, c, 1, 1) + beta.value.reshape(1, c, 1, 1)

    def vjp(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = (g * gamma.value.reshape(1, c, 1, 1)).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        m = xh.shape[2]
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=2, keepdims=True)
            - xh * (dxhat * xh).mean(axis=2, keepdims=True)
        )
        return dx.reshape(n, c, h, w), dgamma, dbeta

    return Node(out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def upsample_nearest(x: Node) -> Node:
    n, c, h, w = x.value.shape
    out = x.value.repeat(2, axis=2).repeat(2, axis=3)

    def vjp(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Node(out, (x,), vjp)


def concat_channels(a: Node, b: Node) -> Node:
    ca = a.value.shape[1]
    out = np.concatenate([a.value, b.value], axis=1)

    def vjp(g):
        return g[:, :ca], g[:, ca:]

    return Node(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def attention_sdp(q: Node, k: Node, v: Node) -> Node:
    """Single-head scaled dot-product over flattened spatial positions.

    q, k, v are (N, C, L); output is (N, C, L) with attention weights
    softmax(q^T k / sqrt(C)) over key positions.
    """
    n, c, l = q.value.shape
    scale = 1.0 / np.sqrt(c)
    scores = np.einsum("ncl,ncm->nlm", q.value, k.value) * scale
    scores -= scores.max(axis=2, keepdims=True)
    expd = np.exp(scores)
    attn = expd / expd.sum(axis=2, keepdims=True)
    out = np.einsum("ncm,nlm->ncl", v.value, attn)

    def vjp(g):
        dattn = np.einsum("ncl,ncm->nlm", g, v.value)
        dv = np.einsum("ncl,nlm->ncm", g, attn)
        dscores = attn * (dattn - (dattn * attn).sum(axis=2, keepdims=True))
        dq = np.einsum("nlm,ncm->ncl", dscores, k.value) * scale
        dk = np.einsum("nlm,ncl->ncm", dscores, q.value) * scale
        return dq, dk, dv

    return Node(out, (q, k, v), vjp)


def reshape(x: Node, shape: tuple) -> Node:
    orig = x.value.shape
    return Node(x.value.reshape(shape), (x,), lambda g: (g.reshape(orig),))
