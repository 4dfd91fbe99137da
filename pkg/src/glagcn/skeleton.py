"""Pose graphs, the three-way spatial partition and its normalized adjacency.

Joint ordering for the presets follows the common 17-joint Human3.6M and
15-joint HumanEva-I layouts used by 2D-to-3D lifting code.  Rest poses are in
millimetres with +y up and the subject's left side on +x, so mirroring x and
swapping left/right joints maps a rest pose onto itself.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import ValidationError

DEFAULT_ALPHA = 0.001


@dataclass(frozen=True)
class SkeletonGraph:
    joint_count: int
    edges: tuple[tuple[int, int], ...]
    root: int
    left_right_pairs: tuple[tuple[int, int], ...]
    joint_names: tuple[str, ...]
    reference_pose: np.ndarray  # (N, 2)
    name: str = "custom"
    rest_pose: np.ndarray | None = field(default=None, compare=False)  # (N, 3), used by the generator

    def parents(self) -> list[int]:
        """Parent index of every joint when the tree is hung from ``root`` (-1 for root)."""
        adj = _neighbours(self.joint_count, self.edges)
        parent = [-2] * self.joint_count
        parent[self.root] = -1
        order = [self.root]
        for node in order:
            for nb in adj[node]:
                if parent[nb] == -2:
                    parent[nb] = node
                    order.append(nb)
        return parent

    def topological_order(self) -> list[int]:
        adj = _neighbours(self.joint_count, self.edges)
        seen = {self.root}
        order = [self.root]
        for node in order:
            for nb in adj[node]:
                if nb not in seen:
                    seen.add(nb)
                    order.append(nb)
        return order

    def tree_adjacency(self, self_loops: bool = True) -> np.ndarray:
        a = np.zeros((self.joint_count, self.joint_count))
        for u, v in self.edges:
            a[u, v] = a[v, u] = 1.0
        if self_loops:
            a += np.eye(self.joint_count)
        return a

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "name": self.name,
            "joint_count": self.joint_count,
            "edges": [list(e) for e in self.edges],
            "root": self.root,
            "left_right_pairs": [list(p) for p in self.left_right_pairs],
            "joint_names": list(self.joint_names),
            "reference_pose": np.asarray(self.reference_pose, dtype=float).tolist(),
        }
        if self.rest_pose is not None:
            out["rest_pose"] = np.asarray(self.rest_pose, dtype=float).tolist()
        return out


@dataclass(frozen=True)
class AdjacencyStack:
    raw: np.ndarray  # (K, N, N) of 0/1
    normalized: np.ndarray | None = None  # (K, N, N)
    alpha: float = DEFAULT_ALPHA

    @property
    def subset_count(self) -> int:
        return self.raw.shape[0]

    @property
    def joint_count(self) -> int:
        return self.raw.shape[1]


def _neighbours(n: int, edges: Sequence[tuple[int, int]]) -> list[list[int]]:
    adj: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    return adj


# name, parent; rest offsets are absolute positions (mm)
_H36M17 = [
    ("pelvis", -1, (0.0, 0.0, 0.0)),
    ("right_hip", 0, (-130.0, 0.0, 0.0)),
    ("right_knee", 1, (-130.0, -450.0, 20.0)),
    ("right_ankle", 2, (-130.0, -880.0, -10.0)),
    ("left_hip", 0, (130.0, 0.0, 0.0)),
    ("left_knee", 4, (130.0, -450.0, 20.0)),
    ("left_ankle", 5, (130.0, -880.0, -10.0)),
    ("spine", 0, (0.0, 230.0, -10.0)),
    ("thorax", 7, (0.0, 480.0, 0.0)),
    ("neck", 8, (0.0, 580.0, 30.0)),
    ("head", 9, (0.0, 700.0, 10.0)),
    ("left_shoulder", 8, (170.0, 460.0, 0.0)),
    ("left_elbow", 11, (190.0, 180.0, 10.0)),
    ("left_wrist", 12, (200.0, -70.0, 40.0)),
    ("right_shoulder", 8, (-170.0, 460.0, 0.0)),
    ("right_elbow", 14, (-190.0, 180.0, 10.0)),
    ("right_wrist", 15, (-200.0, -70.0, 40.0)),
]
_H36M17_PAIRS = [(4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16)]

_HUMANEVA15 = [
    ("pelvis", -1, (0.0, 0.0, 0.0)),
    ("thorax", 0, (0.0, 480.0, 0.0)),
    ("left_shoulder", 1, (170.0, 460.0, 0.0)),
    ("left_elbow", 2, (190.0, 180.0, 10.0)),
    ("left_wrist", 3, (200.0, -70.0, 40.0)),
    ("right_shoulder", 1, (-170.0, 460.0, 0.0)),
    ("right_elbow", 5, (-190.0, 180.0, 10.0)),
    ("right_wrist", 6, (-200.0, -70.0, 40.0)),
    ("left_hip", 0, (120.0, 0.0, 0.0)),
    ("left_knee", 8, (120.0, -440.0, 20.0)),
    ("left_ankle", 9, (120.0, -860.0, -10.0)),
    ("right_hip", 0, (-120.0, 0.0, 0.0)),
    ("right_knee", 11, (-120.0, -440.0, 20.0)),
    ("right_ankle", 12, (-120.0, -860.0, -10.0)),
    ("head", 1, (0.0, 680.0, 20.0)),
]
_HUMANEVA15_PAIRS = [(2, 5), (3, 6), (4, 7), (8, 11), (9, 12), (10, 13)]

PRESETS = ("h36m17", "humaneva15")


def _from_table(name, table, pairs) -> SkeletonGraph:
    rest = np.array([row[2] for row in table])
    return build_skeleton({
        "name": name,
        "joint_count": len(table),
        "edges": [(p, i) for i, (_, p, _) in enumerate(table) if p >= 0],
        "root": 0,
        "left_right_pairs": pairs,
        "joint_names": [row[0] for row in table],
        "reference_pose": rest[:, :2],
        "rest_pose": rest,
    })


def build_skeleton(definition: str | Mapping[str, Any] | SkeletonGraph) -> SkeletonGraph:
    """Build a validated skeleton from a preset name or a custom definition mapping.

    A custom mapping needs ``edges``, ``root`` and ``reference_pose``; the
    other fields default sensibly (no flip pairs, generated names).
    """
    if isinstance(definition, SkeletonGraph):
        definition = definition.to_dict()
    if isinstance(definition, str):
        if definition == "h36m17":
            return _from_table("h36m17", _H36M17, _H36M17_PAIRS)
        if definition == "humaneva15":
            return _from_table("humaneva15", _HUMANEVA15, _HUMANEVA15_PAIRS)
        raise ValidationError(f"unknown skeleton preset {definition!r}; expected one of {PRESETS} or a custom mapping")

    d = dict(definition)
    for key in ("edges", "root", "reference_pose"):
        if key not in d:
            raise ValidationError(f"custom skeleton is missing field '{key}'")
    try:
        ref = np.asarray(d["reference_pose"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"reference_pose: not numeric ({exc})") from None
    n = int(d.get("joint_count", ref.shape[0] if ref.ndim == 2 else 0))
    if n < 1:
        raise ValidationError("joint_count: must be >= 1")
    if ref.shape != (n, 2):
        raise ValidationError(f"reference_pose: expected shape ({n}, 2), got {ref.shape}")
    if not np.all(np.isfinite(ref)):
        raise ValidationError("reference_pose: non-finite coordinates")

    edges = tuple((int(u), int(v)) for u, v in d["edges"])
    for u, v in edges:
        if not (0 <= u < n and 0 <= v < n):
            raise ValidationError(f"edges: index out of range in ({u}, {v}) for {n} joints")
        if u == v:
            raise ValidationError(f"edges: self-loop at joint {u}")
    if len(edges) != n - 1:
        raise ValidationError(f"edges: a tree over {n} joints needs {n - 1} edges, got {len(edges)}")
    reach = {0}
    stack = [0]
    adj = _neighbours(n, edges)
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in reach:
                reach.add(nb)
                stack.append(nb)
    if len(reach) != n:
        # n-1 edges and not connected means a cycle somewhere as well
        raise ValidationError(f"edges: graph is disconnected or has a cycle ({len(reach)} of {n} joints reachable)")

    root = int(d["root"])
    if not 0 <= root < n:
        raise ValidationError(f"root: index {root} out of range for {n} joints")

    pairs = tuple((int(a), int(b)) for a, b in d.get("left_right_pairs", ()))
    used: set[int] = set()
    for a, b in pairs:
        if not (0 <= a < n and 0 <= b < n):
            raise ValidationError(f"left_right_pairs: index out of range in ({a}, {b})")
        if a == b:
            raise ValidationError(f"left_right_pairs: pair ({a}, {b}) uses one joint twice")
        if a in used or b in used:
            raise ValidationError(f"left_right_pairs: joint repeated across pairs in ({a}, {b})")
        used.update((a, b))
    if root in used:
        raise ValidationError("left_right_pairs: the root joint cannot be part of a flip pair")

    names = tuple(str(s) for s in d.get("joint_names", [f"joint{i}" for i in range(n)]))
    if len(names) != n:
        raise ValidationError(f"joint_names: expected {n} names, got {len(names)}")

    rest = d.get("rest_pose")
    if rest is not None:
        rest = np.asarray(rest, dtype=float)
        if rest.shape != (n, 3):
            raise ValidationError(f"rest_pose: expected shape ({n}, 3), got {rest.shape}")
        rest.setflags(write=False)
    ref = ref.copy()
    ref.setflags(write=False)
    return SkeletonGraph(
        joint_count=n, edges=edges, root=root, left_right_pairs=pairs, joint_names=names,
        reference_pose=ref, name=str(d.get("name", "custom")), rest_pose=rest,
    )


def compute_partitions(graph: SkeletonGraph, kernel_size: int = 3, alpha: float = DEFAULT_ALPHA) -> AdjacencyStack:
    """Split every neighbourhood into self / centripetal / centrifugal subsets.

    ``raw[1][i][j] = 1`` when neighbour ``j`` sits closer to the reference
    pose's gravity centre than ``i``; ``raw[2]`` holds the farther ones.
    Self-loops and equal-distance neighbours go to ``raw[0]``.
    """
    if kernel_size != 3:
        raise ValidationError(f"unsupported kernel size {kernel_size}; only the 3-subset partition is defined")
    n = graph.joint_count
    ref = np.asarray(graph.reference_pose, dtype=float)
    dist = np.linalg.norm(ref - ref.mean(axis=0), axis=1)
    raw = np.zeros((3, n, n))
    raw[0] = np.eye(n)
    for u, v in graph.edges:
        for i, j in ((u, v), (v, u)):
            tie = abs(dist[j] - dist[i]) <= 1e-9 * max(1.0, dist[i], dist[j])
            if tie:
                raw[0, i, j] = 1.0
            elif dist[j] < dist[i]:
                raw[1, i, j] = 1.0
            else:
                raw[2, i, j] = 1.0
    raw.setflags(write=False)
    return AdjacencyStack(raw=raw, alpha=alpha)


def normalize_adjacency(stack: AdjacencyStack) -> AdjacencyStack:
    """Fill ``normalized[k] = L^-1/2 raw[k] L^-1/2`` with ``L_ii = sum_j raw[k][i][j] + alpha``."""
    if stack.alpha <= 0:
        raise ValidationError("alpha must be positive")
    raw = np.asarray(stack.raw, dtype=float)
    inv_sqrt = 1.0 / np.sqrt(raw.sum(axis=2) + stack.alpha)  # (K, N)
    norm = inv_sqrt[:, :, None] * raw * inv_sqrt[:, None, :]
    norm.setflags(write=False)
    return AdjacencyStack(raw=stack.raw, normalized=norm, alpha=stack.alpha)


def adjacency_for(graph: SkeletonGraph, kernel_size: int = 3, alpha: float = DEFAULT_ALPHA) -> AdjacencyStack:
    return normalize_adjacency(compute_partitions(graph, kernel_size, alpha))


def flip_permutation(graph: SkeletonGraph) -> np.ndarray:
    perm = np.arange(graph.joint_count)
    for a, b in graph.left_right_pairs:
        perm[a], perm[b] = b, a
    return perm
