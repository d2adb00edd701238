"""Density-based pseudo-label generation for unlabeled target features.

`dbscan` is the production implementation (scan-order breadth-first
expansion); `dbscan_reference` recomputes the same partition through an
unrelated mechanism (union-find over core-core reachability) and exists
purely so tests can cross-check the two. Both use inclusive Euclidean
neighborhoods (distance <= eps, the point itself counted) and attach
border points to the earliest-discovered cluster, which makes results
deterministic for a fixed input ordering.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import Tensor

__all__ = [
    "ClusterConfig",
    "PseudoLabelAssignment",
    "dbscan",
    "dbscan_reference",
    "generate_pseudo_labels",
    "export_assignment",
]


@dataclass
class ClusterConfig:
    """Neighborhood radius and core-point threshold.

    The defaults assume L2-normalized features, whose pairwise distances
    lie in [0, 2].
    """

    eps: float = 0.5
    min_pts: int = 4

    def __post_init__(self):
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.min_pts < 1:
            raise ConfigError(f"min_pts must be at least 1, got {self.min_pts}")


@dataclass
class PseudoLabelAssignment:
    """Per-sample cluster ids, -1 marking noise; ids are contiguous from 0."""

    labels: np.ndarray
    num_clusters: int
    epoch: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        present = set(self.labels.tolist()) - {-1}
        expected = set(range(self.num_clusters))
        if present != expected:
            raise ShapeError(
                f"cluster ids must be exactly 0..{self.num_clusters - 1}, got {sorted(present)}"
            )
        if self.labels.size and self.labels.min() < -1:
            raise ShapeError("labels below -1 are not meaningful")

    @property
    def noise_mask(self) -> np.ndarray:
        return self.labels == -1

    @property
    def all_noise(self) -> bool:
        return self.labels.size > 0 and self.num_clusters == 0


def _as_points(points) -> np.ndarray:
    pts = points.data if isinstance(points, Tensor) else np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ShapeError(f"expected points of shape (N, C), got {pts.shape}")
    return pts


def _neighborhoods(pts: np.ndarray, eps: float):
    sq = np.sum(pts * pts, axis=1)
    d2 = sq[:, None] - 2.0 * (pts @ pts.T) + sq[None, :]
    np.maximum(d2, 0.0, out=d2)
    return d2 <= eps * eps


def dbscan(points, eps: float, min_pts: int) -> PseudoLabelAssignment:
    """Density clustering: scan points in order, grow each new core's cluster.

    Core points have at least min_pts neighbors within eps (inclusive,
    self counted). A border point keeps the first cluster that reaches
    it, which is the one with the lowest-index founding core.
    """
    ClusterConfig(eps=eps, min_pts=min_pts)
    pts = _as_points(points)
    n = pts.shape[0]
    if n == 0:
        return PseudoLabelAssignment(labels=np.empty(0, dtype=np.int64), num_clusters=0)
    within = _neighborhoods(pts, eps)
    core = within.sum(axis=1) >= min_pts
    neighbors = [np.flatnonzero(row) for row in within]

    labels = np.full(n, -1, dtype=np.int64)
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for p in range(n):
        if visited[p]:
            continue
        visited[p] = True
        if not core[p]:
            continue  # stays noise unless a later cluster claims it as border
        labels[p] = cluster
        queue = deque(neighbors[p])
        while queue:
            q = queue.popleft()
            if labels[q] == -1:
                labels[q] = cluster
            if visited[q]:
                continue
            visited[q] = True
            if core[q]:
                queue.extend(neighbors[q])
        cluster += 1
    return PseudoLabelAssignment(labels=labels, num_clusters=cluster)


def dbscan_reference(points, eps: float, min_pts: int) -> PseudoLabelAssignment:
    """Same partition as `dbscan`, computed by union-find over core pairs."""
    ClusterConfig(eps=eps, min_pts=min_pts)
    pts = _as_points(points)
    n = pts.shape[0]
    if n == 0:
        return PseudoLabelAssignment(labels=np.empty(0, dtype=np.int64), num_clusters=0)
    within = _neighborhoods(pts, eps)
    core = within.sum(axis=1) >= min_pts
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    core_idx = np.flatnonzero(core)
    for i in core_idx:
        for j in core_idx[core_idx > i]:
            if within[i, j]:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[rj] = ri

    earliest = {}
    for i in core_idx:
        root = find(i)
        earliest.setdefault(root, i)
    order = sorted(earliest, key=earliest.get)
    cluster_of_root = {root: k for k, root in enumerate(order)}

    labels = np.full(n, -1, dtype=np.int64)
    for i in core_idx:
        labels[i] = cluster_of_root[find(i)]
    for i in range(n):
        if core[i]:
            continue
        reachable = [cluster_of_root[find(j)] for j in core_idx if within[i, j]]
        if reachable:
            labels[i] = min(reachable)
    return PseudoLabelAssignment(labels=labels, num_clusters=len(order))


def generate_pseudo_labels(features, config: ClusterConfig, epoch: int = 0) -> PseudoLabelAssignment:
    """L2-normalize feature rows, then cluster them.

    Rows with zero norm are left at the origin. An all-noise outcome is
    reported through the assignment's `all_noise` flag; callers keep the
    epoch going with whatever supervision remains.
    """
    pts = _as_points(features)
    norms = np.linalg.norm(pts, axis=1, keepdims=True)
    normalized = np.divide(pts, norms, out=np.zeros_like(pts), where=norms > 0)
    result = dbscan(normalized, eps=config.eps, min_pts=config.min_pts)
    result.epoch = epoch
    return result


def export_assignment(assignment: PseudoLabelAssignment, path) -> Path:
    """Write one `sample_id,label` row per sample."""
    path = Path(path)
    lines = ["sample_id,label"]
    lines += [f"{i},{int(label)}" for i, label in enumerate(assignment.labels)]
    path.write_text("\n".join(lines) + "\n")
    return path
