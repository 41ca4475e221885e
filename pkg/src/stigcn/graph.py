"""Skeleton graphs and the spectral operators built on them.

Everything here is dense: skeletons have at most a few dozen joints.
"""
from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "GraphError",
    "SkeletonTopology",
    "GraphMatrix",
    "ChebyshevBasis",
    "PRESETS",
    "build_topology",
    "adjacency",
    "normalized_laplacian",
    "power_iteration",
    "scaled_laplacian",
    "chebyshev_basis",
    "basis_for",
    "edge_checksum",
    "bfs_distances",
]

PRESET_VERSION = 1

# NTU RGB+D, 1-based joint labels as drawn in the dataset's joint chart.
_NTU25_EDGES_1BASED = (
    (1, 2), (2, 21), (3, 21), (4, 3), (5, 21), (6, 5), (7, 6), (8, 7),
    (9, 21), (10, 9), (11, 10), (12, 11), (13, 1), (14, 13), (15, 14),
    (16, 15), (17, 1), (18, 17), (19, 18), (20, 19), (22, 23), (23, 8),
    (24, 25), (25, 12),
)

# Kinetics-Skeleton (OpenPose 18-keypoint layout), 0-based labels.
_KINETICS18_EDGES = (
    (4, 3), (3, 2), (7, 6), (6, 5), (13, 12), (12, 11), (10, 9), (9, 8),
    (11, 5), (8, 2), (5, 1), (2, 1), (0, 1), (15, 0), (14, 0), (17, 15),
    (16, 14),
)

PRESETS = {
    "ntu25": {
        "joint_count": 25,
        "edges": tuple((i - 1, j - 1) for i, j in _NTU25_EDGES_1BASED),
        "center_joint": 0,  # label 1, base of the spine
    },
    "kinetics18": {
        "joint_count": 18,
        "edges": _KINETICS18_EDGES,
        "center_joint": 1,  # neck
    },
    # five-joint stand-in for tests and quick runs
    "mini5": {
        "joint_count": 5,
        "edges": ((0, 1), (1, 2), (1, 3), (3, 4)),
        "center_joint": 1,
    },
}

_ALIASES = {"ntu": "ntu25", "kinetics": "kinetics18"}


class GraphError(ValueError):
    """Raised for malformed skeleton graphs or spectral failures."""


@dataclass(frozen=True)
class SkeletonTopology:
    """Undirected skeleton graph with a designated center joint."""

    name: str
    joint_count: int
    edges: tuple[tuple[int, int], ...]
    center_joint: int = 0

    def __post_init__(self):
        edges = tuple((min(int(a), int(b)), max(int(a), int(b))) for a, b in self.edges)
        object.__setattr__(self, "edges", edges)
        _validate(self.joint_count, self.edges, self.center_joint)

    @property
    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.joint_count, dtype=int)
        for a, b in self.edges:
            deg[a] += 1
            deg[b] += 1
        return deg

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "joint_count": self.joint_count,
            "edges": [list(e) for e in self.edges],
            "center_joint": self.center_joint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonTopology":
        if "edges" not in d:
            return build_topology(d["name"])
        return cls(d.get("name", "custom"), int(d["joint_count"]),
                   tuple(tuple(e) for e in d["edges"]), int(d.get("center_joint", 0)))


def _validate(n: int, edges: Sequence[tuple[int, int]], center: int) -> None:
    if n < 1:
        raise GraphError(f"joint_count must be positive, got {n}")
    if not 0 <= center < n:
        raise GraphError(f"center joint {center} outside [0, {n})")
    seen = set()
    for a, b in edges:
        if not (0 <= a < n and 0 <= b < n):
            raise GraphError(f"edge ({a}, {b}) references a joint outside [0, {n})")
        if a == b:
            raise GraphError(f"edge ({a}, {b}) is a self-edge")
        if (a, b) in seen:
            raise GraphError(f"edge ({a}, {b}) is duplicated")
        seen.add((a, b))
    if n == 1:
        return
    dist = bfs_distances(n, edges, center)
    missing = [j for j in range(n) if dist[j] < 0]
    if missing:
        raise GraphError(f"graph is disconnected: joint {missing[0]} unreachable from joint {center}")


def bfs_distances(n: int, edges: Iterable[tuple[int, int]], source: int) -> np.ndarray:
    """Hop distance from ``source`` to every joint; -1 marks unreachable joints."""
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for a, b in edges:
        nbrs[a].append(b)
        nbrs[b].append(a)
    dist = np.full(n, -1, dtype=int)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for w in nbrs[u]:
            if dist[w] < 0:
                dist[w] = dist[u] + 1
                queue.append(w)
    return dist


def build_topology(preset_or_edges, joint_count: int | None = None,
                   center_joint: int = 0, name: str = "custom") -> SkeletonTopology:
    """Return a validated topology from a preset id or a custom edge list.

    >>> build_topology("ntu25").joint_count
    25
    >>> build_topology([(0, 1), (1, 2), (2, 0)], joint_count=3).degrees.tolist()
    [2, 2, 2]
    """
    if isinstance(preset_or_edges, str):
        key = _ALIASES.get(preset_or_edges, preset_or_edges)
        if key not in PRESETS:
            raise GraphError(f"unknown topology preset {preset_or_edges!r}; "
                             f"choose from {sorted(PRESETS)}")
        p = PRESETS[key]
        return SkeletonTopology(key, p["joint_count"], p["edges"], p["center_joint"])
    edges = tuple(tuple(e) for e in preset_or_edges)
    if joint_count is None:
        joint_count = 1 + max(max(e) for e in edges) if edges else 1
    return SkeletonTopology(name, int(joint_count), edges, int(center_joint))


def edge_checksum(topology: SkeletonTopology) -> str:
    """SHA-256 over a canonical text form of the edge list."""
    text = f"{topology.joint_count}:{topology.center_joint}:" + ";".join(
        f"{a}-{b}" for a, b in sorted(topology.edges))
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass(frozen=True)
class GraphMatrix:
    """A dense, read-only ``size x size`` matrix tagged with what it represents."""

    kind: str
    entries: np.ndarray = field(repr=False)

    def __post_init__(self):
        a = np.array(self.entries, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise GraphError(f"graph matrix must be square, got shape {a.shape}")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)

    def to_json(self) -> dict:
        return {"kind": self.kind, "size": self.size, "rows": self.entries.tolist()}


def _as_array(m) -> np.ndarray:
    return m.entries if isinstance(m, GraphMatrix) else np.asarray(m, dtype=np.float64)


def adjacency(topology: SkeletonTopology) -> GraphMatrix:
    a = np.zeros((topology.joint_count, topology.joint_count))
    for i, j in topology.edges:
        a[i, j] = a[j, i] = 1.0
    return GraphMatrix("adjacency", a)


def normalized_laplacian(adj) -> GraphMatrix:
    """``I - D^-1/2 A D^-1/2`` with ``D`` the row sums of ``A``."""
    a = _as_array(adj)
    deg = a.sum(axis=1)
    if np.any(deg <= 0):
        raise GraphError(f"joint {int(np.argmin(deg))} has zero degree; "
                         "normalized Laplacian undefined")
    d = 1.0 / np.sqrt(deg)
    lap = np.eye(len(a)) - d[:, None] * a * d[None, :]
    return GraphMatrix("laplacian", (lap + lap.T) / 2)


def power_iteration(m, tol: float = 1e-10, max_iter: int = 10_000) -> tuple[float, np.ndarray]:
    """Dominant eigenpair of a symmetric PSD matrix.

    Stops once the residual ``||M v - lam v||`` drops to ``tol``.
    """
    m = _as_array(m)
    v = np.random.default_rng(0).standard_normal(len(m))
    v /= np.linalg.norm(v)
    residual = np.inf
    for _ in range(max_iter):
        w = m @ v
        lam = float(v @ w)
        residual = float(np.linalg.norm(w - lam * v))
        if residual <= tol:
            return lam, v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        v = w / norm
    raise GraphError(f"power iteration did not converge in {max_iter} iterations "
                     f"(residual {residual:.3e})")


def scaled_laplacian(lap, mode: str = "fixed_two") -> GraphMatrix:
    """Rescale the spectrum into [-1, 1]: ``2 L / lambda_max - I``."""
    lmat = _as_array(lap)
    if mode == "fixed_two":
        lam = 2.0
    elif mode == "exact":
        lam, _ = power_iteration(lmat)
    else:
        raise ValueError(f"mode must be 'exact' or 'fixed_two', got {mode!r}")
    if lam <= 0:
        raise GraphError(f"lambda_max must be positive, got {lam}")
    out = 2.0 * lmat / lam - np.eye(len(lmat))
    return GraphMatrix("scaled_laplacian", (out + out.T) / 2)


@dataclass(frozen=True)
class ChebyshevBasis:
    order: int
    matrices: tuple[GraphMatrix, ...]

    def __getitem__(self, r: int) -> np.ndarray:
        return self.matrices[r].entries

    def __len__(self):
        return len(self.matrices)

    @property
    def size(self) -> int:
        return self.matrices[0].size


def chebyshev_basis(l_hat, order: int = 4) -> ChebyshevBasis:
    """``T_0 .. T_order`` of the scaled Laplacian via the three-term recursion."""
    if order < 0:
        raise ValueError(f"order must be >= 0, got {order}")
    lh = _as_array(l_hat)
    mats = [np.eye(len(lh))]
    if order >= 1:
        mats.append(lh.copy())
    for _ in range(2, order + 1):
        mats.append(2.0 * lh @ mats[-1] - mats[-2])
    return ChebyshevBasis(order, tuple(GraphMatrix(f"chebyshev({r})", t) for r, t in enumerate(mats)))


_BASIS_CACHE: dict[tuple, ChebyshevBasis] = {}


def basis_for(topology: SkeletonTopology, order: int = 4, mode: str = "fixed_two") -> ChebyshevBasis:
    """Cached Chebyshev basis of a topology's scaled Laplacian."""
    key = (topology.joint_count, topology.edges, order, mode)
    if key not in _BASIS_CACHE:
        lh = scaled_laplacian(normalized_laplacian(adjacency(topology)), mode)
        _BASIS_CACHE[key] = chebyshev_basis(lh, order)
    return _BASIS_CACHE[key]
