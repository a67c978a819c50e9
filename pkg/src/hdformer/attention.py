"""First-order joint self-attention and high-order joint-to-hyperbone attention."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .encoding import HyperboneEncoder, HyperboneEncoderConfig
from .errors import FormatError, RecordingDisabledError, ShapeError, VersionMismatchError
from .layers import MLP, LayerNorm, Linear, Module, param

FUSIONS = ("summation", "concat")


def _split_heads(x, heads):
    # (B, T, N, S*C) -> (B, T, S, N, C)
    B, T, N, SC = x.shape
    return nx.transpose(nx.reshape(x, (B, T, N, heads, SC // heads)), (0, 1, 3, 2, 4))


def _fuse_heads(h, fusion, w_o=None):
    # h: (B, T, S, N, C)
    if fusion == "summation":
        return nx.sum_(h, axis=2)
    B, T, S, N, C = h.shape
    cat = nx.reshape(nx.transpose(h, (0, 1, 3, 2, 4)), (B, T, N, S * C))
    return w_o(cat)


class _Block(Module):
    """Shared residual / norm / MLP scaffolding."""

    def _init_common(self, channels, heads, rng, fusion, mlp_ratio, activation,
                     dropout, residual, norm):
        if fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {fusion!r}")
        if heads < 1:
            raise ValueError("need at least one head")
        self.channels = channels
        self.heads = heads
        self.fusion = fusion
        self.dropout = dropout
        self.residual = residual
        self.norm1 = LayerNorm(channels) if norm else None
        self.norm2 = LayerNorm(channels) if norm else None
        self.w_o = Linear(heads * channels, channels, rng, bias=False) if fusion == "concat" else None
        self.mlp = MLP(channels, rng, mlp_ratio, activation, dropout)
        self.record = False
        self.last_attention = None

    def _finish(self, z, attn_out, train, rng):
        attn_out = nx.dropout(attn_out, self.dropout, train, rng)
        z = z + attn_out if self.residual else attn_out
        h = self.norm2(z) if self.norm2 is not None else z
        m = self.mlp(h, train, rng)
        return z + m if self.residual else m

    def _keep(self, weights):
        if self.record:
            self.last_attention = weights.data.mean(axis=(0, 1, 2))


class FirstOrderAttention(_Block):
    """Multi-head self-attention over joints with adjacency bias ``A + psi``.

    Per head: ``softmax((Q K^T + A + psi) / sqrt(d)) V`` with ``d`` the
    per-head width, which equals the channel count.
    """

    kind = "first_order"

    def __init__(self, channels, heads, adjacency, rng, *, use_psi=True, psi_sharing="block",
                 fusion="summation", mlp_ratio=2, activation="gelu", dropout=0.0,
                 residual=True, norm=True):
        self._init_common(channels, heads, rng, fusion, mlp_ratio, activation, dropout,
                          residual, norm)
        self.adjacency = np.asarray(adjacency, dtype=float)
        J = self.adjacency.shape[0]
        self.w_q = Linear(channels, heads * channels, rng, bias=False)
        self.w_k = Linear(channels, heads * channels, rng, bias=False)
        self.w_v = Linear(channels, heads * channels, rng, bias=False)
        if psi_sharing not in ("block", "head"):
            raise ValueError(f"psi_sharing must be 'block' or 'head', got {psi_sharing!r}")
        self.psi_sharing = psi_sharing
        if use_psi:
            self.psi = param(np.zeros((J, J)) if psi_sharing == "block" else np.zeros((heads, J, J)))
        else:
            self.psi = None

    def logits(self, h):
        J = self.adjacency.shape[0]
        if h.shape[-2] != J:
            raise ShapeError(f"input has {h.shape[-2]} joints, adjacency is {J}x{J}")
        q = _split_heads(self.w_q(h), self.heads)
        k = _split_heads(self.w_k(h), self.heads)
        s = nx.matmul(q, nx.swap_last(k)) + self.adjacency
        if self.psi is not None:
            s = s + self.psi
        return nx.scale(s, 1.0 / math.sqrt(self.channels))

    def attend(self, h):
        """Fused attention output before residual and MLP."""
        attn = nx.softmax_lastdim(self.logits(h))
        self._keep(attn)
        v = _split_heads(self.w_v(h), self.heads)
        return _fuse_heads(nx.matmul(attn, v), self.fusion, self.w_o)

    def forward(self, z, train=False, rng=None):
        h = self.norm1(z) if self.norm1 is not None else z
        return self._finish(z, self.attend(h), train, rng)


class HighOrderAttention(_Block):
    """Cross-attention with joints as queries and hyperbone features as keys/values.

    The score matrix per head is J x M; no adjacency bias is applied.
    """

    kind = "high_order"

    def __init__(self, channels, heads, index, rng, *, encoder="sub_concat",
                 fusion="summation", mlp_ratio=2, activation="gelu", dropout=0.0,
                 residual=True, norm=True):
        self._init_common(channels, heads, rng, fusion, mlp_ratio, activation, dropout,
                          residual, norm)
        if index.M == 0:
            raise ShapeError("high-order attention needs at least one hyperbone")
        self.index = index
        self.encoder = HyperboneEncoder(HyperboneEncoderConfig(encoder, channels), index, rng)
        self.w_q = Linear(channels, heads * channels, rng, bias=False)
        self.w_k = Linear(channels, heads * channels, rng, bias=False)
        self.w_v = Linear(channels, heads * channels, rng, bias=False)

    def attend(self, h, H):
        if h.shape[:2] != H.shape[:2] or h.shape[-1] != H.shape[-1]:
            raise ShapeError(f"joint features {h.shape} and hyperbone features {H.shape} disagree")
        if H.shape[-2] == 0:
            raise ShapeError("no hyperbones to attend to")
        q = _split_heads(self.w_q(h), self.heads)
        k = _split_heads(self.w_k(H), self.heads)
        v = _split_heads(self.w_v(H), self.heads)
        scores = nx.scale(nx.matmul(q, nx.swap_last(k)), 1.0 / math.sqrt(self.channels))
        attn = nx.softmax_lastdim(scores)  # (B, T, S, J, M)
        self._keep(attn)
        return _fuse_heads(nx.matmul(attn, v), self.fusion, self.w_o)

    def forward(self, zhat, train=False, rng=None):
        h = self.norm1(zhat) if self.norm1 is not None else zhat
        H = self.encoder(h)
        return self._finish(zhat, self.attend(h, H), train, rng)


class HDFormerBlock(Module):
    """First-order attention, optionally followed by high-order attention."""

    def __init__(self, foa, hoa=None):
        self.foa = foa
        self.hoa = hoa

    def forward(self, z, train=False, rng=None):
        z = self.foa(z, train, rng)
        if self.hoa is not None:
            z = self.hoa(z, train, rng)
        return z


# ------------------------------------------------------------- attention dumps

DUMP_MAGIC = "HDFATTN"
DUMP_VERSION = 1


@dataclass
class AttentionMap:
    block: str
    kind: str
    weights: np.ndarray
    legend: list = field(default_factory=list)


@dataclass
class AttentionDump:
    maps: list

    def __len__(self):
        return len(self.maps)

    def __getitem__(self, i):
        return self.maps[i]


def dump_attention(model, x) -> AttentionDump:
    """Run ``model`` on ``x`` and collect the head-averaged attention of every block.

    Maps are averaged over batch, time and heads: J x J for first-order
    blocks and J x M for high-order blocks.
    """
    blocks = list(model.attention_blocks())
    if not blocks:
        raise RecordingDisabledError("model has no attention blocks")
    if not getattr(model, "record_attention", False):
        raise RecordingDisabledError("attention recording is disabled on this model")
    for _, b in blocks:
        b.last_attention = None
    with nx.no_grad():
        model.forward(x)
    maps = []
    for name, b in blocks:
        if b.last_attention is None:
            raise RecordingDisabledError(f"block {name} recorded nothing")
        legend = [list(p) for p in b.index.legend()] if b.kind == "high_order" else []
        maps.append(AttentionMap(name, b.kind, b.last_attention.copy(), legend))
    return AttentionDump(maps)


def write_attention_map(path, amap: AttentionMap):
    header = {
        "version": DUMP_VERSION,
        "block": amap.block,
        "kind": amap.kind,
        "shape": list(amap.weights.shape),
        "legend": amap.legend,
    }
    with open(path, "wb") as fh:
        fh.write(f"{DUMP_MAGIC} {DUMP_VERSION}\n".encode())
        fh.write((json.dumps(header, separators=(",", ":")) + "\n").encode())
        fh.write(np.ascontiguousarray(amap.weights, dtype="<f8").tobytes())


def read_attention_map(path) -> AttentionMap:
    with open(path, "rb") as fh:
        magic = fh.readline().decode(errors="replace").split()
        if len(magic) != 2 or magic[0] != DUMP_MAGIC:
            raise FormatError(f"{path}: not an attention dump")
        if int(magic[1]) != DUMP_VERSION:
            raise VersionMismatchError(f"{path}: version {magic[1]}, expected {DUMP_VERSION}")
        header = json.loads(fh.readline())
        payload = fh.read()
    shape = tuple(header["shape"])
    expected = int(np.prod(shape)) * 8
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    weights = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return AttentionMap(header["block"], header["kind"], weights, header.get("legend", []))


def save_dump(dump: AttentionDump, out_dir, index=None) -> list:
    """Write one file per block plus ``legend.txt``; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, amap in enumerate(dump.maps):
        p = os.path.join(out_dir, f"{i:02d}_{amap.block.replace('.', '_')}.attn")
        write_attention_map(p, amap)
        paths.append(p)
    if index is not None:
        legend = os.path.join(out_dir, "legend.txt")
        with open(legend, "w") as fh:
            for i, path in enumerate(index.legend()):
                fh.write(f"{i}\t{' '.join(map(str, path))}\n")
        paths.append(legend)
    return paths
