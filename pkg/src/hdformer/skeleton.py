"""Directed skeleton trees and hyperbone enumeration.

A hyperbone is the unique directed path from an ancestor joint down to one of
its descendants. Its *order* is the number of joints on the path, so a single
bone has order 2.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegeneratePathError, NoDirectedPathError, TopologyError


@dataclass(frozen=True)
class TopologySpec:
    joints: int
    root: int
    edges: tuple
    names: tuple | None = None
    name: str = "custom"


@dataclass(frozen=True, eq=False)
class SkeletonGraph:
    joint_count: int
    edges: tuple
    root: int
    names: tuple | None = None
    name: str = "custom"
    parent: tuple = field(repr=False, default=())

    @property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.joint_count, self.joint_count))
        for p, c in self.edges:
            a[p, c] = 1.0
        return a

    def children(self, j):
        return [c for p, c in self.edges if p == j]

    def depth(self, j):
        d = 0
        while j != self.root:
            j = self.parent[j]
            d += 1
        return d

    def ancestors(self, j):
        """Strict ancestors of ``j``, nearest first."""
        out = []
        while j != self.root:
            j = self.parent[j]
            out.append(j)
        return out


@dataclass(frozen=True)
class Hyperbone:
    path: tuple

    @property
    def order(self):
        return len(self.path)

    @property
    def start(self):
        return self.path[0]

    @property
    def end(self):
        return self.path[-1]

    def __iter__(self):
        return iter(self.path)


@dataclass(frozen=True)
class HyperboneIndex:
    """All hyperbones up to ``max_order``, stored in canonical order.

    Canonical order is order ascending, then (start, end) lexicographic.
    """

    max_order: int
    by_order: dict
    joint_count: int

    @property
    def flat(self) -> list:
        return [hb for o in sorted(self.by_order) for hb in self.by_order[o]]

    @property
    def M(self) -> int:
        return sum(len(v) for v in self.by_order.values())

    def count(self, order):
        return len(self.by_order.get(order, ()))

    def slices(self) -> dict:
        """Row range of each order inside the flat ordering."""
        out, start = {}, 0
        for o in sorted(self.by_order):
            n = len(self.by_order[o])
            out[o] = slice(start, start + n)
            start += n
        return out

    def paths_array(self, order) -> np.ndarray:
        """(count, order) integer array of joint indices for one order."""
        hbs = self.by_order.get(order, [])
        return np.array([hb.path for hb in hbs], dtype=np.intp).reshape(len(hbs), order)

    def legend(self) -> list:
        return [hb.path for hb in self.flat]


def build_skeleton(topology: TopologySpec) -> SkeletonGraph:
    """Validate a topology and return the corresponding directed tree."""
    n, root = topology.joints, topology.root
    if n < 1:
        raise TopologyError(f"joint count must be positive, got {n}")
    if not 0 <= root < n:
        raise TopologyError(f"root {root} outside [0, {n})")
    edges = tuple((int(p), int(c)) for p, c in topology.edges)
    parent = [-1] * n
    for p, c in edges:
        for j in (p, c):
            if not 0 <= j < n:
                raise TopologyError(f"edge ({p}, {c}) references joint {j} outside [0, {n})")
        if p == c:
            raise TopologyError(f"self-loop on joint {p}")
        if c == root:
            raise TopologyError(f"root {root} cannot have a parent (edge ({p}, {c}))")
        if parent[c] != -1:
            raise TopologyError(f"joint {c} has multiple parents: {parent[c]} and {p}")
        parent[c] = p
    if len(edges) != n - 1:
        raise TopologyError(f"a tree on {n} joints needs {n - 1} edges, got {len(edges)}")
    for j in range(n):
        if j == root:
            continue
        # walking up must reach the root without revisiting
        seen, k = {j}, j
        while k != root:
            k = parent[k]
            if k == -1:
                raise TopologyError(f"joint {j} is not connected to the root")
            if k in seen:
                raise TopologyError(f"cycle through joint {k}")
            seen.add(k)
    if topology.names is not None and len(topology.names) != n:
        raise TopologyError(f"{len(topology.names)} names given for {n} joints")
    return SkeletonGraph(n, edges, root, topology.names, topology.name, tuple(parent))


def shortest_path(g: SkeletonGraph, i: int, j: int) -> Hyperbone:
    """The directed path from ancestor ``i`` to descendant ``j``."""
    for k in (i, j):
        if not 0 <= k < g.joint_count:
            raise NoDirectedPathError(f"joint {k} outside [0, {g.joint_count})")
    if i == j:
        raise DegeneratePathError(f"degenerate path: start and end are both joint {i}")
    path = [j]
    k = j
    while k != i:
        if k == g.root:
            raise NoDirectedPathError(f"no directed path from joint {i} to joint {j}")
        k = g.parent[k]
        path.append(k)
    return Hyperbone(tuple(reversed(path)))


def enumerate_hyperbones(g: SkeletonGraph, max_order: int) -> HyperboneIndex:
    if max_order < 2:
        raise ValueError(f"max_order must be >= 2, got {max_order}")
    by_order = {o: [] for o in range(2, max_order + 1)}
    for end in range(g.joint_count):
        # ancestors nearest first: the k-th one starts a path of order k + 2
        for k, start in enumerate(g.ancestors(end)[: max_order - 1]):
            by_order[k + 2].append(shortest_path(g, start, end))
    for o in by_order:
        by_order[o].sort(key=lambda hb: (hb.start, hb.end))
    return HyperboneIndex(max_order, by_order, g.joint_count)


def order_from_config(order_joints=None, spd_edges=None) -> int:
    """Resolve the order cap from either naming convention.

    ``order_joints`` counts joints on the path; ``spd_edges`` counts edges, so
    ``spd_edges = order_joints - 1``.
    """
    if order_joints is None and spd_edges is None:
        raise ValueError("give order_joints or spd_edges")
    if spd_edges is not None:
        derived = int(spd_edges) + 1
        if order_joints is not None and int(order_joints) != derived:
            raise ValueError(f"order_joints={order_joints} contradicts spd_edges={spd_edges}")
        return derived
    return int(order_joints)


# ----------------------------------------------------------------- topologies

H36M_NAMES = (
    "hip", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
)

H36M = TopologySpec(
    joints=17,
    root=0,
    edges=(
        (0, 1), (1, 2), (2, 3),
        (0, 4), (4, 5), (5, 6),
        (0, 7), (7, 8), (8, 9), (9, 10),
        (8, 11), (11, 12), (12, 13),
        (8, 14), (14, 15), (15, 16),
    ),
    names=H36M_NAMES,
    name="h36m",
)

MPI_INF_3DHP_NAMES = (
    "head_top", "neck", "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist", "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle", "pelvis", "spine", "head",
)

MPI_INF_3DHP = TopologySpec(
    joints=17,
    root=14,
    edges=(
        (14, 8), (8, 9), (9, 10),
        (14, 11), (11, 12), (12, 13),
        (14, 15), (15, 1), (1, 16), (16, 0),
        (1, 2), (2, 3), (3, 4),
        (1, 5), (5, 6), (6, 7),
    ),
    names=MPI_INF_3DHP_NAMES,
    name="mpi_inf_3dhp",
)

# five-joint tree for desk-scale models and tests
TOY5 = TopologySpec(
    joints=5,
    root=0,
    edges=((0, 1), (1, 2), (0, 3), (3, 4)),
    names=("root", "a1", "a2", "b1", "b2"),
    name="toy5",
)

BUILTIN_TOPOLOGIES = {"h36m": H36M, "mpi_inf_3dhp": MPI_INF_3DHP, "toy5": TOY5}


def parse_topology(text: str, name="custom") -> TopologySpec:
    """Parse the plain-text topology format.

    ::

        # comment
        name: h36m
        joints: 17
        root: 0
        edge: 0 1
        label: 0 hip
    """
    joints = root = None
    edges, labels = [], {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise TopologyError(f"expected 'key: value', got {raw!r}", line=lineno)
        key, value = key.strip(), value.strip()
        try:
            if key == "joints":
                joints = int(value)
            elif key == "root":
                root = int(value)
            elif key == "edge":
                p, c = value.split()
                edges.append((int(p), int(c)))
            elif key == "label":
                idx, label = value.split(maxsplit=1)
                labels[int(idx)] = label
            elif key == "name":
                name = value
            else:
                raise TopologyError(f"unknown key {key!r}", line=lineno)
        except ValueError as exc:
            if isinstance(exc, TopologyError):
                raise
            raise TopologyError(f"cannot parse {key!r} value {value!r}", line=lineno) from None
    if joints is None:
        raise TopologyError("missing 'joints:' line")
    if root is None:
        raise TopologyError("missing 'root:' line")
    names = None
    if labels:
        if sorted(labels) != list(range(joints)):
            raise TopologyError("labels must cover every joint exactly once")
        names = tuple(labels[i] for i in range(joints))
    return TopologySpec(joints, root, tuple(edges), names, name)


def format_topology(spec: TopologySpec) -> str:
    lines = [f"name: {spec.name}", f"joints: {spec.joints}", f"root: {spec.root}"]
    lines += [f"edge: {p} {c}" for p, c in spec.edges]
    if spec.names:
        lines += [f"label: {i} {n}" for i, n in enumerate(spec.names)]
    return "\n".join(lines) + "\n"


def load_topology(name_or_path: str) -> SkeletonGraph:
    """Load a built-in topology by name, or parse a topology file."""
    if name_or_path in BUILTIN_TOPOLOGIES:
        return build_skeleton(BUILTIN_TOPOLOGIES[name_or_path])
    if not os.path.exists(name_or_path):
        known = ", ".join(sorted(BUILTIN_TOPOLOGIES))
        raise TopologyError(f"unknown topology {name_or_path!r} (built-ins: {known})")
    with open(name_or_path) as fh:
        stem = os.path.splitext(os.path.basename(name_or_path))[0]
        return build_skeleton(parse_topology(fh.read(), name=stem))


def random_tree(n: int, rng: np.random.Generator) -> TopologySpec:
    """Uniformly random recursive tree on ``n`` joints, rooted at a random joint."""
    perm = rng.permutation(n)
    edges = []
    for k in range(1, n):
        p = perm[rng.integers(0, k)]
        edges.append((int(p), int(perm[k])))
    return TopologySpec(n, int(perm[0]), tuple(edges))


def graph_from_parents(parents: Sequence[int]) -> SkeletonGraph:
    """Build from a parent list where the root has parent -1."""
    root = [i for i, p in enumerate(parents) if p < 0]
    if len(root) != 1:
        raise TopologyError("exactly one joint must have parent -1")
    edges = tuple((p, c) for c, p in enumerate(parents) if p >= 0)
    return build_skeleton(TopologySpec(len(parents), root[0], edges))
