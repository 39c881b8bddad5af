"""Gated dual-head denoiser: a convolutional encoder-decoder with
featurewise timestep conditioning that maps (noisy terrain, surface raster)
to a residual correction and per-pixel ground-confidence logits.

Parameters live in one flat vector with a named layout, so the optimizer,
checkpoints, and gradient checks all address the same storage. The forward
pass builds a reverse-mode graph (see autodiff); training keeps the graph
as a tape and seeds it with loss gradients, inference just reads values.

Prediction fusion: with confidence p = sigmoid(logits),

    gated output   = p * dsm + (1 - p) * (dsm - residual)
                   = dsm - (1 - p) * residual

so confident-ground pixels keep the surface raster untouched and low
confidence pixels take the full residual correction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .grid import Grid

CHECKPOINT_MAGIC = b"FCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    """Network shape and prediction-mode switches.

    ``depth`` encoder stages each halve the resolution; channel width stays
    at ``base_channels`` throughout. ``nonlinearity`` may be "identity" to
    run the network as a purely linear map (used by gradient oracles).
    ``gated=False`` bypasses confidence fusion; ``predict_absolute=True``
    makes the first head predict terrain directly instead of a residual.
    """

    base_channels: int = 16
    depth: int = 2
    resblocks_per_stage: int = 1
    use_bottleneck_attention: bool = False
    timestep_embed_dim: int = 32
    nonlinearity: str = "silu"
    use_norm: bool = True
    gated: bool = True
    predict_absolute: bool = False

    def __post_init__(self):
        if self.base_channels < 1 or self.depth < 0:
            raise ValueError("base_channels >= 1 and depth >= 0 required")
        if self.resblocks_per_stage < 1:
            raise ValueError("resblocks_per_stage must be >= 1")
        if self.timestep_embed_dim < 2 or self.timestep_embed_dim % 2:
            raise ValueError("timestep_embed_dim must be even and >= 2")
        if self.nonlinearity not in ("silu", "identity"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")


@dataclass(frozen=True)
class ParamEntry:
    name: str
    shape: tuple[int, ...]
    offset: int
    init: str  # "he" | "zeros" | "ones" | "embed"

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def _resblock_entries(prefix: str, c_in: int, c_out: int, embed: int) -> list[tuple[str, tuple, str]]:
    entries = [
        (f"{prefix}.conv1.w", (c_out, c_in, 3, 3), "he"),
        (f"{prefix}.conv1.b", (c_out,), "zeros"),
        (f"{prefix}.gn1.g", (c_out,), "ones"),
        (f"{prefix}.gn1.b", (c_out,), "zeros"),
        (f"{prefix}.film.w", (embed, 2 * c_out), "zeros"),
        (f"{prefix}.film.b", (2 * c_out,), "zeros"),
        (f"{prefix}.conv2.w", (c_out, c_out, 3, 3), "he"),
        (f"{prefix}.conv2.b", (c_out,), "zeros"),
        (f"{prefix}.gn2.g", (c_out,), "ones"),
        (f"{prefix}.gn2.b", (c_out,), "zeros"),
    ]
    if c_in != c_out:
        entries += [
            (f"{prefix}.skip.w", (c_out, c_in, 1, 1), "he"),
            (f"{prefix}.skip.b", (c_out,), "zeros"),
        ]
    return entries


def build_layout(arch: ArchSpec) -> list[ParamEntry]:
    c = arch.base_channels
    e = arch.timestep_embed_dim
    raw: list[tuple[str, tuple, str]] = [
        ("emb.w", (e, e), "embed"),
        ("emb.b", (e,), "zeros"),
        ("stem.w", (c, 2, 3, 3), "he"),
        ("stem.b", (c,), "zeros"),
    ]
    for s in range(arch.depth):
        for i in range(arch.resblocks_per_stage):
            raw += _resblock_entries(f"enc{s}.rb{i}", c, c, e)
        raw += [(f"enc{s}.down.w", (c, c, 3, 3), "he"), (f"enc{s}.down.b", (c,), "zeros")]
    raw += _resblock_entries("mid.rb0", c, c, e)
    if arch.use_bottleneck_attention:
        raw += [
            ("mid.attn.gn.g", (c,), "ones"),
            ("mid.attn.gn.b", (c,), "zeros"),
            ("mid.attn.q.w", (c, c, 1, 1), "he"),
            ("mid.attn.q.b", (c,), "zeros"),
            ("mid.attn.k.w", (c, c, 1, 1), "he"),
            ("mid.attn.k.b", (c,), "zeros"),
            ("mid.attn.v.w", (c, c, 1, 1), "he"),
            ("mid.attn.v.b", (c,), "zeros"),
            ("mid.attn.o.w", (c, c, 1, 1), "zeros"),
            ("mid.attn.o.b", (c,), "zeros"),
        ]
    raw += _resblock_entries("mid.rb1", c, c, e)
    for s in reversed(range(arch.depth)):
        raw += [(f"dec{s}.up.w", (c, c, 3, 3), "he"), (f"dec{s}.up.b", (c,), "zeros")]
        for i in range(arch.resblocks_per_stage):
            c_in = 2 * c if i == 0 else c
            raw += _resblock_entries(f"dec{s}.rb{i}", c_in, c, e)
    raw += [
        ("head_r.w", (1, c, 3, 3), "zeros"),
        ("head_r.b", (1,), "zeros"),
        ("head_l.w", (1, c, 3, 3), "zeros"),
        ("head_l.b", (1,), "zeros"),
    ]

    entries = []
    offset = 0
    for name, shape, init in raw:
        entry = ParamEntry(name, shape, offset, init)
        entries.append(entry)
        offset += entry.size
    return entries


def param_count(arch: ArchSpec) -> int:
    layout = build_layout(arch)
    return layout[-1].offset + layout[-1].size


@dataclass
class DenoiserModel:
    """Flat parameter vector plus the layout that interprets it."""

    arch: ArchSpec
    params: np.ndarray

    def __post_init__(self):
        expected = param_count(self.arch)
        if self.params.size != expected:
            raise ValueError(f"parameter vector has {self.params.size} entries, layout needs {expected}")
        if not np.isfinite(self.params).all():
            raise ValueError("parameters must be finite")

    def with_params(self, params: np.ndarray) -> "DenoiserModel":
        return DenoiserModel(self.arch, params)


def init_model(arch: ArchSpec = ArchSpec(), seed: int = 0, dtype=np.float32) -> DenoiserModel:
    """He-initialized convolutions, identity normalization/modulation,
    zero output heads (so a fresh model outputs exactly zero maps)."""
    rng = np.random.default_rng(seed)
    layout = build_layout(arch)
    total = layout[-1].offset + layout[-1].size
    params = np.zeros(total, dtype=dtype)
    for entry in layout:
        view = params[entry.offset : entry.offset + entry.size]
        if entry.init == "he":
            fan_in = int(np.prod(entry.shape[1:]))
            view[:] = (rng.standard_normal(entry.size) * np.sqrt(2.0 / fan_in)).astype(dtype)
        elif entry.init == "ones":
            view[:] = 1.0
        elif entry.init == "embed":
            view[:] = (rng.standard_normal(entry.size) / np.sqrt(entry.shape[0])).astype(dtype)
        # "zeros" entries stay zero
    return DenoiserModel(arch, params)


def timestep_features(t: np.ndarray, t_max: int, dim: int) -> np.ndarray:
    """Sinusoidal features of t/t_max at log-spaced frequencies."""
    x = np.asarray(t, dtype=np.float64) / float(t_max)
    half = dim // 2
    freqs = (np.pi / 2.0) * (128.0 ** (np.arange(half) / max(half - 1, 1)))
    angles = x[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class Tape:
    """Recorded activations of one forward pass, ready for one backward."""

    def __init__(self, outputs, param_nodes, layout, param_size, head_in):
        self.outputs = outputs
        self._param_nodes = param_nodes
        self._layout = layout
        self._param_size = param_size
        self.head_in = head_in
        self._used = False

    def backward(self, *seeds: np.ndarray) -> np.ndarray:
        """Seed the recorded outputs with upstream gradients and return the
        flat parameter gradient. A tape is single-use."""
        if self._used:
            raise RuntimeError("tape already consumed; run a new forward pass")
        if len(seeds) != len(self.outputs):
            raise ValueError(f"expected {len(self.outputs)} seed arrays")
        self._used = True
        ad.backprop(list(self.outputs), list(seeds))
        grad = np.zeros(self._param_size, dtype=self.outputs[0].value.dtype)
        for entry, node in zip(self._layout, self._param_nodes):
            if node.grad is not None:
                grad[entry.offset : entry.offset + entry.size] = node.grad.reshape(-1)
        return grad


class _Net:
    """Graph builder bound to one architecture."""

    def __init__(self, arch: ArchSpec):
        self.arch = arch
        self.layout = build_layout(arch)
        self._index = {e.name: e for e in self.layout}
        self.param_size = self.layout[-1].offset + self.layout[-1].size

    def _params_as_nodes(self, params: np.ndarray) -> dict[str, ad.Node]:
        return {
            e.name: ad.leaf(params[e.offset : e.offset + e.size].reshape(e.shape))
            for e in self.layout
        }

    def _act(self, x: ad.Node) -> ad.Node:
        return ad.silu(x) if self.arch.nonlinearity == "silu" else x

    def _norm(self, x: ad.Node, p, prefix: str) -> ad.Node:
        if not self.arch.use_norm:
            return x
        c = x.value.shape[1]
        groups = min(8, c)
        while c % groups:
            groups -= 1
        return ad.group_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"], groups)

    def _resblock(self, x: ad.Node, emb: ad.Node, p, prefix: str) -> ad.Node:
        h = ad.conv2d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"])
        h = self._norm(h, p, f"{prefix}.gn1")
        gb = ad.linear(emb, p[f"{prefix}.film.w"], p[f"{prefix}.film.b"])
        h = ad.film(h, gb)
        h = self._act(h)
        h = ad.conv2d(h, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"])
        h = self._norm(h, p, f"{prefix}.gn2")
        h = self._act(h)
        if f"{prefix}.skip.w" in self._index:
            x = ad.conv2d(x, p[f"{prefix}.skip.w"], p[f"{prefix}.skip.b"])
        return ad.add(h, x)

    def _attention(self, x: ad.Node, p) -> ad.Node:
        n, c, h, w = x.value.shape
        hn = self._norm(x, p, "mid.attn.gn")
        q = ad.reshape(ad.conv2d(hn, p["mid.attn.q.w"], p["mid.attn.q.b"]), (n, c, h * w))
        k = ad.reshape(ad.conv2d(hn, p["mid.attn.k.w"], p["mid.attn.k.b"]), (n, c, h * w))
        v = ad.reshape(ad.conv2d(hn, p["mid.attn.v.w"], p["mid.attn.v.b"]), (n, c, h * w))
        att = ad.reshape(ad.attention_sdp(q, k, v), (n, c, h, w))
        out = ad.conv2d(att, p["mid.attn.o.w"], p["mid.attn.o.b"])
        return ad.add(out, x)

    def forward(self, params: np.ndarray, g_t: np.ndarray, dsm: np.ndarray, t: np.ndarray, t_max: int):
        """g_t, dsm: (N, H, W); t: (N,) integer steps. Returns
        (residual node, logits node, param node list, pre-head node)."""
        arch = self.arch
        n, h, w = g_t.shape
        div = 2**arch.depth
        if h % div or w % div:
            raise ValueError("pad or resize input")
        p = self._params_as_nodes(params)

        feats = timestep_features(t, t_max, arch.timestep_embed_dim).astype(params.dtype)
        emb = ad.linear(ad.constant(feats), p["emb.w"], p["emb.b"])

        x = np.stack([g_t, dsm], axis=1).astype(params.dtype)
        feat = ad.conv2d(ad.constant(x), p["stem.w"], p["stem.b"])

        skips = []
        for s in range(arch.depth):
            for i in range(arch.resblocks_per_stage):
                feat = self._resblock(feat, emb, p, f"enc{s}.rb{i}")
            skips.append(feat)
            feat = ad.conv2d(feat, p[f"enc{s}.down.w"], p[f"enc{s}.down.b"], stride=2)

        feat = self._resblock(feat, emb, p, "mid.rb0")
        if arch.use_bottleneck_attention:
            feat = self._attention(feat, p)
        feat = self._resblock(feat, emb, p, "mid.rb1")

        for s in reversed(range(arch.depth)):
            feat = ad.upsample_nearest(feat)
            feat = ad.conv2d(feat, p[f"dec{s}.up.w"], p[f"dec{s}.up.b"])
            feat = ad.concat_channels(feat, skips[s])
            for i in range(arch.resblocks_per_stage):
                feat = self._resblock(feat, emb, p, f"dec{s}.rb{i}")

        head_in = feat
        r_hat = ad.conv2d(head_in, p["head_r.w"], p["head_r.b"])
        logits = ad.conv2d(head_in, p["head_l.w"], p["head_l.b"])
        r_hat = ad.reshape(r_hat, (n, h, w))
        logits = ad.reshape(logits, (n, h, w))
        param_nodes = [p[e.name] for e in self.layout]
        return r_hat, logits, param_nodes, head_in


_NET_CACHE: dict[ArchSpec, _Net] = {}


def _net_for(arch: ArchSpec) -> _Net:
    net = _NET_CACHE.get(arch)
    if net is None:
        net = _Net(arch)
        _NET_CACHE[arch] = net
    return net


def forward_batch(
    model: DenoiserModel,
    g_t: np.ndarray,
    dsm: np.ndarray,
    t: np.ndarray,
    t_max: int = 10,
    record: bool = False,
):
    """Batched forward. Returns (residual, logits) arrays of shape (N, H, W);
    with ``record=True`` also returns a Tape whose outputs are the two heads."""
    net = _net_for(model.arch)
    r_node, l_node, param_nodes, head_in = net.forward(model.params, g_t, dsm, np.asarray(t), t_max)
    if record:
        tape = Tape((r_node, l_node), param_nodes, net.layout, net.param_size, head_in)
        return r_node.value, l_node.value, tape
    return r_node.value, l_node.value


def forward(model: DenoiserModel, g_t: Grid, dsm: Grid, t: int, t_max: int = 10) -> tuple[Grid, Grid]:
    """Single-raster forward: residual correction and confidence logits."""
    if g_t.shape != dsm.shape:
        raise ValueError("noisy terrain and surface raster must share a shape")
    r, l = forward_batch(model, g_t.values[None], dsm.values[None], np.array([t]), t_max)
    return g_t.with_values(r[0]), g_t.with_values(l[0])


def backward(model: DenoiserModel, tape: Tape, d_residual: np.ndarray, d_logits: np.ndarray) -> np.ndarray:
    """Exact parameter gradients for upstream gradients on the two heads."""
    return tape.backward(d_residual, d_logits)


# ---------------------------------------------------------------------------
# gating
# ---------------------------------------------------------------------------


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    return ad._sigmoid(np.asarray(x, dtype=np.float64))


def gate_values(r_hat: np.ndarray, logits: np.ndarray, dsm: np.ndarray) -> np.ndarray:
    """Confidence fusion p*dsm + (1-p)*(dsm - r_hat) with p = sigmoid(logits),
    computed in the reduced form dsm - (1-p)*r_hat so a zero residual leaves
    the surface raster bit-identical."""
    p = sigmoid_values(logits)
    return dsm - (1.0 - p) * r_hat


def gate(r_hat: Grid, logits: Grid, dsm: Grid) -> Grid:
    if not (r_hat.shape == logits.shape == dsm.shape):
        raise ValueError("gate inputs must share a shape")
    return dsm.with_values(gate_values(r_hat.values, logits.values, dsm.values).astype(dsm.values.dtype))


def fuse_prediction(arch: ArchSpec, head: np.ndarray, logits: np.ndarray, dsm: np.ndarray) -> np.ndarray:
    """Head output -> terrain estimate under the arch's prediction mode."""
    direct = head if arch.predict_absolute else dsm - head
    if not arch.gated:
        return direct
    p = sigmoid_values(logits)
    return p * dsm + (1.0 - p) * direct


def _fuse_nodes(arch: ArchSpec, head: ad.Node, logits: ad.Node, dsm: np.ndarray) -> ad.Node:
    dsm_c = dsm.astype(head.value.dtype)
    if not arch.gated:
        if arch.predict_absolute:
            return head
        return ad.add_const(ad.mul_const(head, -1.0), dsm_c)
    p = ad.sigmoid(logits)
    one_minus_p = ad.add_const(ad.mul_const(p, -1.0), 1.0)
    if arch.predict_absolute:
        keep = ad.mul_const(p, dsm_c)
        return ad.add(keep, ad.mul(one_minus_p, head))
    # reduced gate: dsm - (1 - p) * residual
    return ad.add_const(ad.mul_const(ad.mul(one_minus_p, head), -1.0), dsm_c)


def gated_predict_batch(
    model: DenoiserModel,
    g_t: np.ndarray,
    dsm: np.ndarray,
    t: np.ndarray,
    t_max: int = 10,
    record: bool = False,
):
    """Terrain estimate and logits; with ``record=True`` the returned tape's
    outputs are (terrain estimate, logits) so loss gradients seed directly."""
    net = _net_for(model.arch)
    r_node, l_node, param_nodes, head_in = net.forward(model.params, g_t, dsm, np.asarray(t), t_max)
    g0_node = _fuse_nodes(model.arch, r_node, l_node, dsm)
    if record:
        tape = Tape((g0_node, l_node), param_nodes, net.layout, net.param_size, head_in)
        return g0_node.value, l_node.value, tape
    return g0_node.value, l_node.value


def gated_predict(model: DenoiserModel, g_t: Grid, dsm: Grid, t: int, t_max: int = 10) -> tuple[Grid, Grid]:
    g0, logits = gated_predict_batch(model, g_t.values[None], dsm.values[None], np.array([t]), t_max)
    return g_t.with_values(g0[0]), g_t.with_values(logits[0])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: DenoiserModel) -> None:
    blob = json.dumps(asdict(model.arch), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(model.params, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> DenoiserModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, blob_len = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    blob_start = 4 + struct.calcsize("<HI")
    arch = ArchSpec(**json.loads(raw[blob_start : blob_start + blob_len].decode("utf-8")))
    params = np.frombuffer(raw, dtype="<f4", offset=blob_start + blob_len).copy()
    return DenoiserModel(arch, params)


def variant(model: DenoiserModel, **changes) -> DenoiserModel:
    """Same parameters under modified prediction-mode switches."""
    return DenoiserModel(replace(model.arch, **changes), model.params)
