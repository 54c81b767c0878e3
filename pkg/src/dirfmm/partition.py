"""Worker assignment: k-means over the points, then greedy balanced assignment of partition-level boxes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .core import rng_stream
from .errors import ConfigError
from .octree import BoxKey, Octree


def kmeans_points(points: np.ndarray, p: int, seed: int, max_iters: int = 50,
                  K: float | None = None) -> np.ndarray:
    """Lloyd iterations from k-means++ seeding; returns a cluster id per point.

    Stops after ``max_iters`` or once no centroid moves more than ``1e-6 * K``.
    Empty clusters are re-seeded with the point of the largest cluster that is
    farthest from its centroid.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if p < 1:
        raise ConfigError("need at least one cluster")
    if n < p:
        raise ConfigError(f"cannot form {p} clusters from {n} points")
    if p == 1:
        return np.zeros(n, dtype=np.int64)
    scale = float(K) if K is not None else float(np.ptp(pts, axis=0).max() or 1.0)
    rng = rng_stream(seed, "partition.kmeans")

    centers = np.empty((p, 3))
    centers[0] = pts[rng.integers(n)]
    d2 = ((pts - centers[0]) ** 2).sum(axis=1)
    for c in range(1, p):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers[c] = pts[idx]
        d2 = np.minimum(d2, ((pts - centers[c]) ** 2).sum(axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        dist = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        counts = np.bincount(labels, minlength=p)
        for c in np.flatnonzero(counts == 0):
            big = int(np.argmax(counts))
            members = np.flatnonzero(labels == big)
            far = members[np.argmax(dist[members, big])]
            labels[far] = c
            counts = np.bincount(labels, minlength=p)
        new = np.stack([pts[labels == c].mean(axis=0) for c in range(p)])
        moved = np.linalg.norm(new - centers, axis=1).max()
        centers = new
        if moved < 1e-6 * scale:
            break
    dist = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    final = dist.argmin(axis=1)
    if np.all(np.bincount(final, minlength=p) > 0):
        labels = final
    return labels


@dataclass(frozen=True)
class PartitionMap:
    level: int
    p: int
    assignment: dict[BoxKey, int]

    def owner(self, key: BoxKey) -> int:
        """Worker of any box at or below the partition level."""
        if key.level < self.level:
            raise ValueError(f"{key} lies above the partition level {self.level}")
        return self.assignment[key.ancestor(self.level)]

    @property
    def b_max(self) -> int:
        return math.ceil(len(self.assignment) / self.p)

    def box_counts(self) -> list[int]:
        counts = [0] * self.p
        for w in self.assignment.values():
            counts[w] += 1
        return counts

    def owned_by(self, worker: int):
        def owned(key: BoxKey) -> bool:
            return key.level >= self.level and self.owner(key) == worker
        return owned

    def to_json(self) -> str:
        return json.dumps({"level": self.level, "p": self.p,
                           "boxes": [[k.level, k.i, k.j, k.k, w]
                                     for k, w in sorted(self.assignment.items(),
                                                        key=lambda kv: kv[0].morton())]})

    @classmethod
    def from_json(cls, text: str) -> "PartitionMap":
        obj = json.loads(text)
        return cls(obj["level"], obj["p"],
                   {BoxKey(*row[:4]): int(row[4]) for row in obj["boxes"]})


def check_worker_count(tree: Octree, p: int) -> int:
    """Return the number of non-empty partition-level boxes; fail if ``p`` exceeds it."""
    n = len(tree.levels[tree.partition_level])
    if p < 1:
        raise ConfigError("need at least one worker")
    if p > n:
        raise ConfigError(f"p={p} exceeds the {n} non-empty partition-level boxes "
                          f"(of {8 ** tree.partition_level}); at most {n} workers can be used")
    return n


def build_partition(tree: Octree, clusters: np.ndarray, p: int) -> PartitionMap:
    """Greedy assignment in Morton order: each box goes to the eligible worker
    holding most of its points (ties to the smallest id); a worker stops being
    eligible once it owns ``ceil(n / p)`` boxes.
    """
    n = check_worker_count(tree, p)
    level = tree.partition_level
    b_max = math.ceil(n / p)
    owned = [0] * p
    eligible = np.ones(p, dtype=bool)
    assignment = {}
    for key in tree.levels[level]:
        votes = np.bincount(clusters[tree.nodes[key].point_ids], minlength=p).astype(float)
        votes[~eligible] = -1.0
        w = int(np.argmax(votes))
        assignment[key] = w
        owned[w] += 1
        if owned[w] >= b_max:
            eligible[w] = False
    return PartitionMap(level, p, assignment)


def partition_tree(tree: Octree, p: int, seed: int) -> PartitionMap:
    check_worker_count(tree, p)
    clusters = kmeans_points(tree.points, p, seed, K=tree.K)
    return build_partition(tree, clusters, p)
