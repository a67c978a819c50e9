"""The three-stage U-shaped network and its checkpoint format."""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import FirstOrderAttention, HDFormerBlock, HighOrderAttention
from .encoding import MODES
from .errors import ConfigError, FormatError, ShapeError, TruncationError, VersionMismatchError
from .layers import Linear, Module, TemporalConv, param
from .skeleton import SkeletonGraph, enumerate_hyperbones, load_topology

STAGES = ("down", "up", "merge")


@dataclass
class HDFormerConfig:
    frames: int = 96
    joints: int = 17
    depth: int = 2
    channels: tuple = (64, 128, 256)
    heads: int = 4
    blocks_per_level: int = 1
    bottom_blocks: int = 2
    merge_blocks: int = 2
    order_joints: int = 5
    encoder: str = "sub_concat"
    hoa_placement: tuple = ("merge",)
    fusion: str = "summation"
    merge_fusion: str = "sum"
    dropout: float = 0.3
    activation: str = "gelu"
    residual: bool = True
    norm: bool = True
    use_psi: bool = True
    psi_sharing: str = "block"
    pos_encoding: bool = False
    mlp_ratio: int = 2
    kernel: int = 5
    stride: int = 2
    topology: str = "h36m"
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        placement = self.hoa_placement
        if isinstance(placement, str):
            placement = (placement,) if placement else ()
        self.hoa_placement = _expand_placement(placement)
        self.validate()

    def validate(self):
        if self.depth < 0:
            raise ConfigError("must be >= 0", key="model.depth")
        if len(self.channels) != self.depth + 1:
            raise ConfigError(f"needs depth + 1 = {self.depth + 1} entries, got {len(self.channels)}",
                              key="model.channels")
        if self.frames < 1 or self.frames % (self.stride ** self.depth):
            raise ConfigError(f"frames={self.frames} not divisible by "
                              f"{self.stride}^{self.depth}", key="model.frames")
        if self.encoder not in MODES:
            raise ConfigError(f"expected one of {MODES}", key="model.encoder")
        if self.fusion not in ("summation", "concat"):
            raise ConfigError("expected 'summation' or 'concat'", key="model.fusion")
        if self.merge_fusion != "sum":
            raise ConfigError("only 'sum' is supported", key="model.merge_fusion")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError("expected 'gelu' or 'relu'", key="model.activation")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("must be in [0, 1)", key="model.dropout")
        if self.kernel % 2 == 0:
            raise ConfigError("must be odd", key="model.kernel")
        if self.hoa_placement and self.order_joints < 2:
            raise ConfigError("high-order placement requires order_joints >= 2",
                              key="model.hoa_placement")

    @property
    def max_order(self):
        return self.order_joints

    def temporal_ladder(self):
        down = [self.frames // self.stride ** l for l in range(self.depth + 1)]
        return down + down[-2::-1]

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        d["hoa_placement"] = list(self.hoa_placement)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        spd = d.pop("spd_edges", None)
        if spd is not None:
            derived = int(spd) + 1
            if "order_joints" in d and int(d["order_joints"]) != derived:
                raise ConfigError(f"order_joints={d['order_joints']} contradicts spd_edges={spd}",
                                  key="model.spd_edges")
            d["order_joints"] = derived
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError("unknown key", key="model." + unknown[0])
        return cls(**d)


def _expand_placement(placement):
    out = set()
    for p in placement:
        if p == "all":
            out.update(STAGES)
        elif p in STAGES:
            out.add(p)
        else:
            raise ConfigError(f"unknown stage {p!r}; expected a subset of {STAGES + ('all',)}",
                              key="model.hoa_placement")
    return tuple(s for s in STAGES if s in out)


def configure_stage_placement(cfg: HDFormerConfig, placement) -> HDFormerConfig:
    """Return a copy of ``cfg`` with high-order attention in the given stages."""
    placement = _expand_placement(placement)
    if not placement and cfg.order_joints >= 2:
        warnings.warn("empty high-order placement: building a first-order-only model", stacklevel=2)
    return dataclasses.replace(cfg, hoa_placement=placement)


FULL_SCALE = HDFormerConfig()
MICRO = HDFormerConfig(frames=8, joints=5, depth=1, channels=(8, 16), heads=2,
                       bottom_blocks=1, merge_blocks=1, order_joints=3, dropout=0.0,
                       topology="toy5")


class HDFormer(Module):
    """U-shaped lifting network: (B, T, J, 2) -> (B, T, J, 3)."""

    def __init__(self, cfg: HDFormerConfig, graph: SkeletonGraph):
        if graph.joint_count != cfg.joints:
            raise ConfigError(f"graph has {graph.joint_count} joints, config says {cfg.joints}",
                              key="model.joints")
        self.cfg = cfg
        self.graph = graph
        self.step = 0
        self.record_attention = False
        self.trace = []
        rng = np.random.default_rng(cfg.seed)
        self.index = enumerate_hyperbones(graph, cfg.order_joints) if cfg.order_joints >= 2 else None
        adjacency = graph.adjacency
        C = cfg.channels
        D = cfg.depth

        def block(c, stage):
            foa = FirstOrderAttention(
                c, cfg.heads, adjacency, rng, use_psi=cfg.use_psi, psi_sharing=cfg.psi_sharing,
                fusion=cfg.fusion, mlp_ratio=cfg.mlp_ratio, activation=cfg.activation,
                dropout=cfg.dropout, residual=cfg.residual, norm=cfg.norm)
            hoa = None
            if stage in cfg.hoa_placement:
                hoa = HighOrderAttention(
                    c, cfg.heads, self.index, rng, encoder=cfg.encoder, fusion=cfg.fusion,
                    mlp_ratio=cfg.mlp_ratio, activation=cfg.activation, dropout=cfg.dropout,
                    residual=cfg.residual, norm=cfg.norm)
            return HDFormerBlock(foa, hoa)

        self.embed = Linear(2, C[0], rng)
        self.pos = param(np.zeros((cfg.frames, cfg.joints, C[0]))) if cfg.pos_encoding else None
        self.down = [[block(C[l], "down") for _ in range(cfg.blocks_per_level)] for l in range(D)]
        self.down_conv = [TemporalConv(C[l], C[l + 1], rng, cfg.kernel, cfg.stride) for l in range(D)]
        # the bottom level belongs to the downsampling stage
        self.bottom = [block(C[D], "down") for _ in range(cfg.bottom_blocks)]
        self.up_proj = [Linear(C[l + 1], C[l], rng) for l in range(D)]
        self.skip_proj = [Linear(C[l], C[l], rng) for l in range(D)]
        self.up = [[block(C[l], "up") for _ in range(cfg.blocks_per_level)] for l in range(D)]
        self.merge_proj = [Linear(C[l], C[0], rng) for l in range(D + 1)]
        self.merge = [block(C[0], "merge") for _ in range(cfg.merge_blocks)]
        self.head = Linear(C[0], 3, rng)

    # ------------------------------------------------------------------ API

    def conv_weight_names(self):
        return {f"down_conv.{l}.weight" for l in range(self.cfg.depth)}

    def attention_blocks(self):
        """(name, block) for every attention block in forward order."""
        for name, val in self.named_blocks():
            yield name + ".foa", val.foa
            if val.hoa is not None:
                yield name + ".hoa", val.hoa

    def named_blocks(self):
        for l, blocks in enumerate(self.down):
            for i, b in enumerate(blocks):
                yield f"down.{l}.{i}", b
        for i, b in enumerate(self.bottom):
            yield f"bottom.{i}", b
        for l in reversed(range(self.cfg.depth)):
            for i, b in enumerate(self.up[l]):
                yield f"up.{l}.{i}", b
        for i, b in enumerate(self.merge):
            yield f"merge.{i}", b

    def set_recording(self, on=True):
        self.record_attention = on
        for _, b in self.attention_blocks():
            b.record = on

    def state_dict(self):
        return dict(self.named_parameters())

    def forward(self, x, train=False, rng=None):
        cfg = self.cfg
        x = nx.as_tensor(x)
        if x.ndim != 4 or x.shape[1:] != (cfg.frames, cfg.joints, 2):
            raise ShapeError(f"expected input (B, {cfg.frames}, {cfg.joints}, 2), got {x.shape}")
        self.trace = [x.shape[1]]
        z = self.embed(x)
        if self.pos is not None:
            z = z + self.pos
        skips = []
        for l in range(cfg.depth):
            for b in self.down[l]:
                z = b(z, train, rng)
            skips.append(z)
            z = nx.activation(cfg.activation)(self.down_conv[l](z))
            self.trace.append(z.shape[1])
        for b in self.bottom:
            z = b(z, train, rng)
        scales = [(cfg.depth, z)]
        for l in reversed(range(cfg.depth)):
            z = nx.temporal_upsample_bilinear(z, skips[l].shape[1])
            self.trace.append(z.shape[1])
            z = self.up_proj[l](z) + self.skip_proj[l](skips[l])
            for b in self.up[l]:
                z = b(z, train, rng)
            scales.append((l, z))
        fused = None
        for level, s in scales:
            t = self.merge_proj[level](nx.temporal_upsample_bilinear(s, cfg.frames))
            fused = t if fused is None else fused + t
        z = fused
        for b in self.merge:
            z = b(z, train, rng)
        return self.head(z)

    __call__ = forward

    def predict(self, x):
        with nx.no_grad():
            return self.forward(x).data


def build_model(cfg: HDFormerConfig, graph: SkeletonGraph | None = None) -> HDFormer:
    if graph is None:
        graph = load_topology(cfg.topology)
    if cfg.hoa_placement == () and cfg.order_joints >= 2:
        warnings.warn("empty high-order placement: building a first-order-only model", stacklevel=2)
    return HDFormer(cfg, graph)


def parameter_count(model: Module) -> int:
    return model.num_parameters()


# ------------------------------------------------------------------ checkpoints

CKPT_MAGIC = "HDFCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, model: HDFormer, extra=None):
    """Write header line, JSON metadata line, then raw little-endian float64 blobs."""
    tensors = []
    offset = 0
    blobs = []
    for name, p in model.named_parameters():
        nbytes = p.size * 8
        tensors.append({"name": name, "shape": list(p.shape), "offset": offset})
        blobs.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        offset += nbytes
    header = {
        "version": CKPT_VERSION,
        "config": model.cfg.to_dict(),
        "topology": _topology_dict(model.graph),
        "seed": model.cfg.seed,
        "step": model.step,
        "tensors": tensors,
        "payload_bytes": offset,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(f"{CKPT_MAGIC} {CKPT_VERSION}\n".encode())
        fh.write((json.dumps(header, separators=(",", ":")) + "\n").encode())
        for b in blobs:
            fh.write(b)


def _topology_dict(g: SkeletonGraph):
    return {"name": g.name, "joints": g.joint_count, "root": g.root,
            "edges": [list(e) for e in g.edges], "names": list(g.names) if g.names else None}


def read_checkpoint_header(path):
    with open(path, "rb") as fh:
        magic = fh.readline().decode(errors="replace").split()
        if len(magic) != 2 or magic[0] != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        if int(magic[1]) != CKPT_VERSION:
            raise VersionMismatchError(f"{path}: checkpoint version {magic[1]}, expected {CKPT_VERSION}")
        header = json.loads(fh.readline())
        payload = fh.read()
    return header, payload


def load_checkpoint(path):
    """Return ``(model, extra)`` rebuilt from a checkpoint file."""
    from .skeleton import TopologySpec, build_skeleton

    header, payload = read_checkpoint_header(path)
    if len(payload) != header["payload_bytes"]:
        raise TruncationError(header["payload_bytes"], len(payload), what="checkpoint payload")
    cfg = HDFormerConfig.from_dict(header["config"])
    topo = header["topology"]
    graph = build_skeleton(TopologySpec(topo["joints"], topo["root"],
                                        tuple(tuple(e) for e in topo["edges"]),
                                        tuple(topo["names"]) if topo["names"] else None,
                                        topo["name"]))
    model = HDFormer(cfg, graph)
    params = model.state_dict()
    names = [t["name"] for t in header["tensors"]]
    if sorted(names) != sorted(params):
        missing = sorted(set(params) - set(names))
        raise FormatError(f"{path}: checkpoint tensors do not match the model (missing {missing[:3]})")
    for t in header["tensors"]:
        p = params[t["name"]]
        if tuple(t["shape"]) != p.shape:
            raise FormatError(f"{path}: tensor {t['name']} has shape {t['shape']}, model expects {p.shape}")
        p.data[...] = np.frombuffer(payload, dtype="<f8", count=p.size, offset=t["offset"]).reshape(p.shape)
    model.step = header["step"]
    return model, header.get("extra", {})
