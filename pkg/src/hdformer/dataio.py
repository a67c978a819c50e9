"""Pose-sequence files, windowing, sliding-window inference and synthetic data."""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (ChannelMismatchError, FormatError, ShapeError, TopologyError,
                     TruncationError, VersionMismatchError)
from .skeleton import SkeletonGraph, load_topology

POSE_MAGIC = "HDFPOSE"
POSE_VERSION = 1


@dataclass
class PoseSequence:
    data: np.ndarray  # (frames, J, C)
    topology: str = "h36m"
    fps: float = 50.0
    action: str = ""
    version: int = POSE_VERSION

    @property
    def frames(self):
        return self.data.shape[0]

    @property
    def joints(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


def save_sequence(path, seq: PoseSequence):
    data = np.asarray(seq.data, dtype=float)
    if data.ndim != 3 or data.shape[2] not in (2, 3):
        raise ShapeError(f"pose data must be (frames, J, 2|3), got {data.shape}")
    header = {
        "version": POSE_VERSION,
        "joints": data.shape[1],
        "topology": seq.topology,
        "fps": seq.fps,
        "channels": data.shape[2],
        "frames": data.shape[0],
        "action": seq.action,
    }
    with open(path, "wb") as fh:
        fh.write(f"{POSE_MAGIC} {POSE_VERSION}\n".encode())
        fh.write((json.dumps(header, separators=(",", ":")) + "\n").encode())
        fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_sequence(path, channels=None, check_topology=True) -> PoseSequence:
    """Read a pose file, validating header and payload.

    ``channels`` (2 or 3) asserts the expected coordinate count.
    """
    with open(path, "rb") as fh:
        first = fh.readline().decode(errors="replace").split()
        if len(first) != 2 or first[0] != POSE_MAGIC:
            raise FormatError(f"{path}: not a pose sequence file")
        try:
            version = int(first[1])
        except ValueError:
            raise FormatError(f"{path}: bad version field {first[1]!r}") from None
        if version != POSE_VERSION:
            raise VersionMismatchError(f"{path}: format version {version}, expected {POSE_VERSION}")
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: unreadable header ({exc})") from None
        payload = fh.read()
    for key in ("joints", "channels", "frames", "topology"):
        if key not in header:
            raise FormatError(f"{path}: header is missing {key!r}")
    J, C, F = header["joints"], header["channels"], header["frames"]
    expected = F * J * C * 8
    if len(payload) < expected:
        raise TruncationError(expected, len(payload))
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    if channels is not None and C != channels:
        raise ChannelMismatchError(f"{path}: file has {C} channels, expected {channels}")
    if check_topology:
        try:
            g = load_topology(header["topology"])
        except TopologyError as exc:
            raise FormatError(f"{path}: {exc}") from None
        if g.joint_count != J:
            raise FormatError(f"{path}: {J} joints but topology {header['topology']!r} has {g.joint_count}")
    data = np.frombuffer(payload, dtype="<f8").reshape(F, J, C).astype(float)
    return PoseSequence(data, header["topology"], header.get("fps", 50.0), header.get("action", ""), version)


def import_text(path, joints, channels=2, topology="h36m", fps=50.0) -> PoseSequence:
    """Import a keypoint dump.

    ``.json`` files hold ``{"keypoints": [[[x, y], ...], ...]}`` (frames, J, C).
    Anything else is whitespace/comma separated text, one frame per line.
    """
    if str(path).endswith(".json"):
        with open(path) as fh:
            obj = json.load(fh)
        arr = np.asarray(obj["keypoints"] if isinstance(obj, dict) else obj, dtype=float)
    else:
        with open(path) as fh:
            rows = [ln.replace(",", " ").split() for ln in fh if ln.strip() and not ln.startswith("#")]
        arr = np.asarray(rows, dtype=float)
    try:
        arr = arr.reshape(-1, joints, channels)
    except ValueError:
        raise FormatError(f"{path}: cannot arrange {arr.size} values as (frames, {joints}, {channels})") from None
    return PoseSequence(arr, topology, fps)


# ---------------------------------------------------------------- normalization


def root_center(x, root):
    """Subtract the root joint per frame; returns (centered, root_trajectory)."""
    r = x[..., root:root + 1, :]
    return x - r, r


def displacement_scale(x, root):
    """Mean distance of non-root joints from the root."""
    c, _ = root_center(x, root)
    d = np.linalg.norm(np.delete(c, root, axis=-2), axis=-1)
    return float(d.mean())


def normalize(x, root, scale):
    c, r = root_center(x, root)
    return c / scale, r


def denormalize(xn, root_traj, scale):
    return xn * scale + root_traj


@dataclass
class WindowedDataset:
    x: np.ndarray  # (n, T, J, 2)
    y: np.ndarray  # (n, T, J, 3)
    seq_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    offsets: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.x)


def window_offsets(length, T, stride):
    if length < T:
        return []
    return list(range(0, length - T + 1, stride))


def make_windows(seq2d, seq3d, T, stride_train=None) -> WindowedDataset:
    """Cut complete T-frame windows from one sequence or a list of sequences.

    ``stride_train`` defaults to T // 2. Sequences shorter than T are skipped
    with a warning.
    """
    if isinstance(seq2d, np.ndarray) and seq2d.ndim == 3:
        seq2d, seq3d = [seq2d], [seq3d]
    stride = stride_train or max(1, T // 2)
    xs, ys, ids, offs = [], [], [], []
    for k, (a, b) in enumerate(zip(seq2d, seq3d)):
        a, b = np.asarray(a, float), np.asarray(b, float)
        if len(a) != len(b):
            raise ShapeError(f"sequence {k}: 2D has {len(a)} frames, 3D has {len(b)}")
        starts = window_offsets(len(a), T, stride)
        if not starts:
            warnings.warn(f"sequence {k} has {len(a)} frames < T={T}; skipped", stacklevel=2)
        for s in starts:
            xs.append(a[s:s + T])
            ys.append(b[s:s + T])
            ids.append(k)
            offs.append(s)
    J = seq2d[0].shape[1] if len(seq2d) and np.ndim(seq2d[0]) == 3 else 0
    x = np.stack(xs) if xs else np.zeros((0, T, J, 2))
    y = np.stack(ys) if ys else np.zeros((0, T, J, 3))
    return WindowedDataset(x, y, np.array(ids, int), np.array(offs, int))


def inference_offsets(length, T, step=5):
    """Window starts 0, step, 2*step, ... plus one window flush with the end."""
    if length < T:
        raise ShapeError(f"sequence of {length} frames is shorter than the model window T={T}; "
                         f"pad the sequence to at least {T} frames or use a smaller T")
    offs = list(range(0, length - T + 1, step))
    if offs[-1] != length - T:
        offs.append(length - T)
    return offs


def sliding_window_infer(model, seq2d, T, step=5, stitch="mean", batch_size=32):
    """Predict a whole sequence with fixed-length windows.

    ``model`` maps (n, T, J, 2) arrays to (n, T, J, 3). Overlapping frames are
    averaged (``stitch="mean"``) or taken from the latest window (``"last"``).
    """
    if stitch not in ("mean", "last"):
        raise ValueError(f"stitch must be 'mean' or 'last', got {stitch!r}")
    seq2d = np.asarray(seq2d, float)
    L = len(seq2d)
    offs = inference_offsets(L, T, step)
    predict = model.predict if hasattr(model, "predict") else model
    out = None
    count = np.zeros(L)
    for i in range(0, len(offs), batch_size):
        chunk = offs[i:i + batch_size]
        pred = np.asarray(predict(np.stack([seq2d[o:o + T] for o in chunk])))
        if out is None:
            out = np.zeros((L,) + pred.shape[2:])
        for o, p in zip(chunk, pred):
            if stitch == "mean":
                out[o:o + T] += p
                count[o:o + T] += 1
            else:
                out[o:o + T] = p
                count[o:o + T] = 1
    return out / count[:, None, None]


# --------------------------------------------------------------- synthetic data


@dataclass
class SynthSpec:
    graph: SkeletonGraph
    frames: int = 96
    bone_length: tuple = (100.0, 400.0)
    amplitude: float = 0.5
    frequencies: tuple = (0.1, 1.0)
    components: int = 2
    fps: float = 50.0
    noise: float = 0.0
    root_motion: float = 200.0
    skeleton_seed: int = 0


def _rest_offsets(spec: SynthSpec):
    rng = np.random.default_rng(spec.skeleton_seed)
    g = spec.graph
    offsets = np.zeros((g.joint_count, 3))
    for p, c in g.edges:
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        offsets[c] = d * rng.uniform(*spec.bone_length)
    return offsets


def _rotation(angles):
    """Rotation matrices from (..., 3) XYZ Euler angles."""
    a, b, c = angles[..., 0], angles[..., 1], angles[..., 2]
    ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    one, zero = np.ones_like(a), np.zeros_like(a)
    rx = np.stack([one, zero, zero, zero, ca, -sa, zero, sa, ca], -1).reshape(a.shape + (3, 3))
    ry = np.stack([cb, zero, sb, zero, one, zero, -sb, zero, cb], -1).reshape(a.shape + (3, 3))
    rz = np.stack([cc, -sc, zero, sc, cc, zero, zero, zero, one], -1).reshape(a.shape + (3, 3))
    return rz @ ry @ rx


def synth_generate(spec: SynthSpec, seed):
    """One smooth random motion as (seq2d, seq3d).

    Joint angles are low-frequency sinusoid mixtures; positions come from
    forward kinematics with fixed rest offsets, so bone lengths never change.
    The 2D sequence is the orthographic projection (x, y) plus optional noise.
    """
    rng = np.random.default_rng(seed)
    g = spec.graph
    F, J = spec.frames, g.joint_count
    t = np.arange(F) / spec.fps
    freqs = rng.uniform(*spec.frequencies, size=(J, 3, spec.components))
    phases = rng.uniform(0, 2 * np.pi, size=(J, 3, spec.components))
    amps = rng.uniform(0, spec.amplitude, size=(J, 3, spec.components)) / spec.components
    angles = np.sum(amps * np.sin(2 * np.pi * freqs * t[:, None, None, None] + phases), axis=-1)
    local = _rotation(angles)  # (F, J, 3, 3)
    offsets = _rest_offsets(spec)
    glob = np.zeros_like(local)
    pos = np.zeros((F, J, 3))
    root_freq = rng.uniform(*spec.frequencies, size=3)
    root_phase = rng.uniform(0, 2 * np.pi, size=3)
    pos[:, g.root] = spec.root_motion * np.sin(2 * np.pi * root_freq * t[:, None] + root_phase)
    glob[:, g.root] = local[:, g.root]
    for j in _topological(g):
        if j == g.root:
            continue
        p = g.parent[j]
        glob[:, j] = glob[:, p] @ local[:, j]
        pos[:, j] = pos[:, p] + np.einsum("fij,j->fi", glob[:, p], offsets[j])
    seq2d = pos[..., :2].copy()
    if spec.noise:
        seq2d = seq2d + rng.normal(scale=spec.noise, size=seq2d.shape)
    return seq2d, pos


def _topological(g: SkeletonGraph):
    order, stack = [], [g.root]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(g.children(j)))
    return order


def synth_dataset(graph, sequences, frames, seed, **kw):
    """Several independent synthetic sequences sharing one skeleton."""
    spec = SynthSpec(graph, frames=frames, **kw)
    pairs = [synth_generate(spec, seed * 100003 + k) for k in range(sequences)]
    return [p[0] for p in pairs], [p[1] for p in pairs]
