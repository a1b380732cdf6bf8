"""Skeleton graphs: oriented anatomical trees, normalized base adjacency, bone operator."""

from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass

import numpy as np

# Kinect-v2 25-joint skeleton as used by NTU RGB+D (1-based joint ids, undirected
# bone list as distributed with the ST-GCN family of codebases).  Joint 2 is the
# middle of the spine, which we use as the root.
NTU25_BONES = [
    (1, 2), (2, 21), (3, 21), (4, 3), (5, 21), (6, 5), (7, 6), (8, 7),
    (9, 21), (10, 9), (11, 10), (12, 11), (13, 1), (14, 13), (15, 14), (16, 15),
    (17, 1), (18, 17), (19, 18), (20, 19), (22, 23), (23, 8), (24, 25), (25, 12),
]
NTU25_ROOT = 1


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonGraph:
    n_nodes: int
    edges: tuple[tuple[int, int], ...]  # oriented (src, tgt), center -> extremity
    root: int = 0
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple((int(a), int(b)) for a, b in self.edges))
        n = self.n_nodes
        if n < 1:
            raise GraphError("graph needs at least one node")
        if not 0 <= self.root < n:
            raise GraphError(f"root {self.root} out of range for {n} nodes")
        parent = [-1] * n
        for src, tgt in self.edges:
            for v in (src, tgt):
                if not 0 <= v < n:
                    raise GraphError(f"edge ({src}, {tgt}) references node {v} outside [0, {n})")
            if tgt == self.root:
                raise GraphError(f"root {self.root} cannot be an edge target")
            if parent[tgt] != -1:
                raise GraphError(f"node {tgt} has more than one parent")
            parent[tgt] = src
        missing = [v for v in range(n) if v != self.root and parent[v] == -1]
        if missing:
            raise GraphError(f"node {missing[0]} is isolated (no parent edge)")
        # walking up from every node must reach the root without revisiting
        for v in range(n):
            seen, u = set(), v
            while u != self.root:
                if u in seen:
                    raise GraphError(f"cycle through node {u}")
                seen.add(u)
                u = parent[u]

    @property
    def parents(self) -> np.ndarray:
        """Parent index per node; the root maps to itself."""
        p = np.arange(self.n_nodes)
        for src, tgt in self.edges:
            p[tgt] = src
        return p

    @property
    def undirected_adjacency(self) -> np.ndarray:
        A = np.zeros((self.n_nodes, self.n_nodes), dtype=np.int8)
        for src, tgt in self.edges:
            A[src, tgt] = A[tgt, src] = 1
        return A

    def depth(self) -> np.ndarray:
        d = np.zeros(self.n_nodes, dtype=int)
        par = self.parents
        for v in range(self.n_nodes):
            u = v
            while u != self.root:
                d[v] += 1
                u = par[u]
        return d

    @classmethod
    def from_undirected(cls, n_nodes: int, pairs, root: int, name: str = "custom") -> "SkeletonGraph":
        """Orient an undirected tree away from ``root`` by breadth-first search."""
        nbrs: list[list[int]] = [[] for _ in range(n_nodes)]
        for a, b in pairs:
            nbrs[a].append(b)
            nbrs[b].append(a)
        seen = {root}
        edges = []
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for v in sorted(nbrs[u]):
                if v not in seen:
                    seen.add(v)
                    edges.append((u, v))
                    queue.append(v)
        return cls(n_nodes, tuple(edges), root, name)

    def to_json(self) -> dict:
        return {"n_nodes": self.n_nodes, "root": self.root, "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_json(cls, doc: dict | str) -> "SkeletonGraph":
        if isinstance(doc, str):
            doc = json.loads(doc)
        unknown = set(doc) - {"n_nodes", "root", "edges", "name"}
        if unknown:
            raise GraphError(f"unknown graph keys: {sorted(unknown)}")
        return cls(int(doc["n_nodes"]), tuple(tuple(e) for e in doc["edges"]), int(doc["root"]), doc.get("name", "custom"))


def build_base_topology(g: SkeletonGraph) -> np.ndarray:
    """Symmetric normalization ``D^-1/2 (A + I) D^-1/2`` of the undirected adjacency."""
    A = g.undirected_adjacency.astype(np.float64)
    if g.n_nodes > 1:
        isolated = np.flatnonzero(A.sum(axis=1) == 0)
        if isolated.size:
            raise GraphError(f"node {isolated[0]} is isolated")
    A_hat = A + np.eye(g.n_nodes)
    d = 1.0 / np.sqrt(A_hat.sum(axis=1))
    return d[:, None] * A_hat * d[None, :]


def spatial_gradient(x: np.ndarray, g: SkeletonGraph) -> np.ndarray:
    """Per-edge difference ``x[..., tgt] - x[..., src]`` (nodes on the last axis); 0 at the root."""
    if x.shape[-1] != g.n_nodes:
        raise ValueError(f"node axis has {x.shape[-1]} entries, graph has {g.n_nodes}")
    return x - x[..., g.parents]


def chain(k: int) -> SkeletonGraph:
    if k < 1:
        raise GraphError("chain needs k >= 1")
    return SkeletonGraph(k, tuple((i, i + 1) for i in range(k - 1)), 0, f"chain({k})")


def star(k: int) -> SkeletonGraph:
    """Center node 0 with ``k`` leaves."""
    if k < 1:
        raise GraphError("star needs k >= 1")
    return SkeletonGraph(k + 1, tuple((0, i) for i in range(1, k + 1)), 0, f"star({k})")


def ntu25() -> SkeletonGraph:
    pairs = [(a - 1, b - 1) for a, b in NTU25_BONES]
    return SkeletonGraph.from_undirected(25, pairs, NTU25_ROOT, "ntu25")


_PRESET_RE = re.compile(r"^\s*(chain|star)\s*\(\s*(\d+)\s*\)\s*$")


def preset(name: str) -> SkeletonGraph:
    """``"ntu25"``, ``"chain(k)"`` or ``"star(k)"``."""
    if name == "ntu25":
        return ntu25()
    m = _PRESET_RE.match(name)
    if m is None:
        raise GraphError(f"unknown graph preset {name!r}")
    k = int(m.group(2))
    return chain(k) if m.group(1) == "chain" else star(k)


def resolve_graph(spec) -> SkeletonGraph:
    """Accept a preset name, a JSON dict, or an existing graph."""
    if isinstance(spec, SkeletonGraph):
        return spec
    if isinstance(spec, str):
        return preset(spec)
    if isinstance(spec, dict):
        return SkeletonGraph.from_json(spec)
    raise GraphError(f"cannot build a graph from {type(spec).__name__}")
