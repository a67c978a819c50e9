"""Hyperbone feature encoders.

Each encoder maps the joint features along one hyperbone path to a single
C-dimensional vector. Five variants are provided:

=================  ==================================================
subtraction        f(z_start - z_end)
summation          mean of f(z) over the path
multiplication     element-wise product of f(z) over the path
concatenation      f_o([z_1, ..., z_n])
sub_concat         f_o([z_1 - z_2, ..., z_{n-1} - z_n])
=================  ==================================================

``f`` is one shared linear map; ``f_o`` is a per-order map because the
concatenated width depends on the order.

The single-hyperbone functions (``encode_subtraction`` and friends) take
joint features of shape (..., J, C) and return (..., C). :func:`encode_all`
is the batched path used by the network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError
from .layers import Linear, Module
from .skeleton import HyperboneIndex

MODES = ("subtraction", "summation", "multiplication", "concatenation", "sub_concat")
PER_ORDER_MODES = ("concatenation", "sub_concat")


def _joint(Z, j):
    return nx.take(Z, j, axis=-2)


def encode_subtraction(Z, hb, f):
    return f(_joint(Z, hb.path[0]) - _joint(Z, hb.path[-1]))


def encode_summation(Z, hb, f):
    total = f(_joint(Z, hb.path[0]))
    for j in hb.path[1:]:
        total = total + f(_joint(Z, j))
    return nx.scale(total, 1.0 / len(hb.path))


def encode_multiplication(Z, hb, f):
    prod = f(_joint(Z, hb.path[0]))
    for j in hb.path[1:]:
        prod = prod * f(_joint(Z, j))
    return prod


def _per_order(maps, order):
    try:
        return maps[order]
    except (KeyError, IndexError, TypeError):
        raise ConfigError(f"no linear map configured for order {order}", key="encoder.maps") from None


def encode_concatenation(Z, hb, maps):
    f = _per_order(maps, hb.order)
    return f(nx.concat_lastdim([_joint(Z, j) for j in hb.path]))


def encode_sub_concat(Z, hb, maps):
    f = _per_order(maps, hb.order)
    diffs = [_joint(Z, a) - _joint(Z, b) for a, b in zip(hb.path[:-1], hb.path[1:])]
    return f(nx.concat_lastdim(diffs))


SINGLE = {
    "subtraction": encode_subtraction,
    "summation": encode_summation,
    "multiplication": encode_multiplication,
    "concatenation": encode_concatenation,
    "sub_concat": encode_sub_concat,
}


@dataclass(frozen=True)
class HyperboneEncoderConfig:
    mode: str = "sub_concat"
    channels: int = 64

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown encoder mode {self.mode!r}; expected one of {MODES}",
                              key="encoder")


@dataclass
class HyperboneFeatures:
    H: nx.Tensor
    slices: dict

    def order_slice(self, order):
        """Y_o: the rows holding hyperbones of the given order."""
        return self.H[..., self.slices[order], :]


class HyperboneEncoder(Module):
    """Learnable encoder producing the hyperbone key/value matrix."""

    def __init__(self, cfg: HyperboneEncoderConfig, index: HyperboneIndex, rng):
        self.cfg = cfg
        self.index = index
        C = cfg.channels
        if cfg.mode in PER_ORDER_MODES:
            width = {"concatenation": lambda o: o * C, "sub_concat": lambda o: (o - 1) * C}[cfg.mode]
            self.maps = {o: Linear(width(o), C, rng) for o in sorted(index.by_order) if index.count(o)}
        else:
            self.f = Linear(C, C, rng)

    def map_for(self, order=None):
        return self.maps[order] if self.cfg.mode in PER_ORDER_MODES else self.f

    def encode_one(self, Z, hb):
        fn = SINGLE[self.cfg.mode]
        return fn(Z, hb, self.maps if self.cfg.mode in PER_ORDER_MODES else self.f)

    def forward(self, Z):
        return encode_all(Z, self.index, self.cfg, self).H


def _encode_order(Z, paths, mode, f):
    """Vectorised encoder for every path of one order; returns (..., M_o, C)."""
    n = paths.shape[1]
    if mode == "subtraction":
        return f(nx.take(Z, paths[:, 0], axis=-2) - nx.take(Z, paths[:, -1], axis=-2))
    if mode == "summation":
        fz = f(nx.take(Z, paths, axis=-2))  # (..., M_o, n, C)
        return nx.mean(fz, axis=-2)
    if mode == "multiplication":
        fz = f(Z)
        prod = nx.take(fz, paths[:, 0], axis=-2)
        for k in range(1, n):
            prod = prod * nx.take(fz, paths[:, k], axis=-2)
        return prod
    G = nx.take(Z, paths, axis=-2)  # (..., M_o, n, C)
    if mode == "sub_concat":
        G = nx.take(G, np.arange(n - 1), axis=-2) - nx.take(G, np.arange(1, n), axis=-2)
    lead = G.shape[:-2]
    return f(nx.reshape(G, lead + (G.shape[-2] * G.shape[-1],)))


def encode_all(Z, index: HyperboneIndex, cfg: HyperboneEncoderConfig, encoder: HyperboneEncoder):
    """Stack the encoding of every hyperbone in canonical order: (..., M, C)."""
    Z = nx.as_tensor(Z)
    if Z.shape[-2] != index.joint_count:
        raise ShapeError(f"features have {Z.shape[-2]} joints, hyperbone index expects {index.joint_count}")
    if Z.shape[-1] != cfg.channels:
        raise ShapeError(f"features have {Z.shape[-1]} channels, encoder expects {cfg.channels}")
    if index.M == 0:
        raise ShapeError("hyperbone index is empty")
    blocks = []
    for o in sorted(index.by_order):
        if not index.count(o):
            continue
        f = encoder.map_for(o if cfg.mode in PER_ORDER_MODES else None)
        blocks.append(_encode_order(Z, index.paths_array(o), cfg.mode, f))
    H = blocks[0] if len(blocks) == 1 else nx.concat(blocks, axis=-2)
    return HyperboneFeatures(H, index.slices())
