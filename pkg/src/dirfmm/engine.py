"""Sequential directional FMM over the boxes one worker owns.

Phases run in this order, each over all owned boxes of a level before the
next level:

    lf_upward     leaf charges and low-frequency M2M, finest level first
    hf_upward     directional M2M for widths 1 .. sqrt(K)
    hf_downward   directional M2L then L2L, widest boxes first
    lf_downward   V/X translations, L2L, and leaf evaluation (far, W, U, self)

Translation matrices depend only on box offsets, so each one is built once
per phase and applied to every box pair sharing it.
"""

from __future__ import annotations

import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .core import kernel_matrix
from .errors import ConfigError
from .octree import BoxKey, Octree, direction_of, octant_offset
from .precompute import PrecomputeCache, SkeletonData
from .wedges import DirectionIndex, parent_direction

Slot = tuple[BoxKey, "DirectionIndex | None"]

PHASES = ("lf_m2m", "hf_m2m", "hf_m2l_l2l", "lf_m2l_l2l")


@dataclass
class ChargeStore:
    outgoing: dict[Slot, np.ndarray] = field(default_factory=dict)
    incoming: dict[Slot, np.ndarray] = field(default_factory=dict)  # check potentials

    def add_incoming(self, slot: Slot, vec: np.ndarray) -> None:
        cur = self.incoming.get(slot)
        if cur is None:
            self.incoming[slot] = vec.copy()
        else:
            cur += vec


def _apply_grouped(matrix: np.ndarray, sources: list[np.ndarray]) -> np.ndarray:
    return matrix @ np.stack(sources, axis=1)


class Engine:
    """Runs the four phases for the boxes selected by ``owned``.

    ``densities`` only has to be valid on the points of owned leaves and of the
    leaves they read directly (U and X lists); other entries may be NaN.
    Remote outgoing charges needed by M2L are inserted into ``store.outgoing``
    between phases by the caller.
    """

    def __init__(self, tree: Octree, cache: PrecomputeCache, densities: np.ndarray,
                 owned=None):
        if cache.K != tree.K:
            raise ConfigError(f"cache is for K={cache.K}, tree has K={tree.K}")
        lf_depth = tree.depth - tree.unit_level
        if cache.lowfreq_depth < lf_depth:
            raise ConfigError(f"cache holds low-frequency data to depth {cache.lowfreq_depth}, "
                              f"tree needs {lf_depth}")
        self.tree = tree
        self.cache = cache
        self.lists = tree.lists
        self.densities = np.asarray(densities, dtype=complex)
        self.potentials = np.zeros(len(tree.points), dtype=complex)
        self.store = ChargeStore()
        self.counts: Counter = Counter()
        self.times: dict[str, float] = {p: 0.0 for p in PHASES}
        self._owned = owned or (lambda key: True)

    # ------------------------------------------------------------ helpers

    def owned_at(self, level: int) -> list[BoxKey]:
        if level > self.tree.depth:
            return []
        return [k for k in self.tree.levels[level] if self._owned(k)]

    def width(self, level: int) -> float:
        return self.tree.width(level)

    def skeleton(self, level: int, direction: DirectionIndex | None) -> SkeletonData:
        w = self.width(level)
        if direction is None:
            return self.cache.lowfreq(w)
        return self.cache.directional(w, direction)

    def center(self, key: BoxKey) -> np.ndarray:
        return key.center(self.tree.K)

    def _leaf_points(self, key: BoxKey) -> np.ndarray:
        return self.tree.nodes[key].point_ids

    def _child_direction(self, level: int, direction: DirectionIndex):
        # children of width-1 boxes are low-frequency
        return None if level == self.tree.unit_level else parent_direction(direction)

    def _timed(self, phase, fn):
        t0 = time.perf_counter()
        fn()
        self.times[phase] += time.perf_counter() - t0

    # ------------------------------------------------------------ phases

    def lf_upward(self) -> None:
        self._timed("lf_m2m", self._lf_upward)

    def hf_upward(self) -> None:
        self._timed("hf_m2m", self._hf_upward)

    def hf_downward(self) -> None:
        self._timed("hf_m2l_l2l", self._hf_downward)

    def lf_downward(self) -> None:
        self._timed("lf_m2l_l2l", self._lf_downward)

    def run(self) -> np.ndarray:
        self.lf_upward()
        self.hf_upward()
        self.hf_downward()
        self.lf_downward()
        return self.potentials

    def _upward_children(self, level: int, parents: list[tuple[BoxKey, DirectionIndex | None]],
                         op: str) -> None:
        """Outgoing charges of ``parents`` from their children's outgoing charges."""
        cw = self.width(level + 1)
        groups = defaultdict(list)
        for key, d in parents:
            cd = None if d is None else self._child_direction(level, d)
            for c in self.tree.nodes[key].children:
                groups[(d, cd, c.octant())].append((key, c))
        acc: dict[Slot, np.ndarray] = {}
        for (d, cd, o), pairs in sorted(groups.items(), key=lambda kv: _group_order(kv[0])):
            ps = self.skeleton(level, d)
            cs = self.skeleton(level + 1, cd)
            t = ps.D @ kernel_matrix(ps.check_points, cs.equivalent_points + octant_offset(o, cw))
            res = _apply_grouped(t, [self.store.outgoing[(c, cd)] for _, c in pairs])
            for j, (key, _) in enumerate(pairs):
                slot = (key, d)
                if slot in acc:
                    acc[slot] += res[:, j]
                else:
                    acc[slot] = res[:, j].copy()
            self.counts[op] += len(pairs)
        self.store.outgoing.update(acc)

    def _lf_upward(self) -> None:
        tree = self.tree
        for level in range(tree.depth, tree.unit_level, -1):
            s = self.skeleton(level, None)
            inner = []
            for key in self.owned_at(level):
                node = tree.nodes[key]
                if node.is_leaf:
                    ids = node.point_ids
                    u = kernel_matrix(s.check_points + self.center(key), tree.points[ids]) @ self.densities[ids]
                    self.store.outgoing[(key, None)] = s.D @ u
                    self.counts["lf_p2m"] += 1
                else:
                    inner.append((key, None))
            if inner:
                self._upward_children(level, inner, "lf_m2m")

    def _hf_upward(self) -> None:
        tree = self.tree
        for level in range(tree.unit_level, tree.partition_level - 1, -1):
            work = [(key, d) for key in self.owned_at(level)
                    for d in self.lists.active.get(key, ())]
            if work:
                self._upward_children(level, work, "hf_m2m")

    def _hf_downward(self) -> None:
        tree, lists = self.tree, self.lists
        for level in range(tree.partition_level, tree.unit_level + 1):
            w = self.width(level)
            iw = int(w)
            keys = self.owned_at(level)
            groups = defaultdict(list)
            for key in keys:
                for d, members in lists.hf.get(key, {}).items():
                    for a in members:
                        groups[key.offset_to(a)].append((key, a))
            for n, pairs in sorted(groups.items()):
                d_in = direction_of(iw, n)
                d_out = direction_of(iw, tuple(-x for x in n))
                tgt = self.skeleton(level, d_in)
                src = self.skeleton(level, d_out)
                t = kernel_matrix(tgt.equivalent_points,
                                  src.equivalent_points + np.array(n, dtype=float) * w)
                res = _apply_grouped(t, [self.store.outgoing[(a, d_out)] for _, a in pairs])
                for j, (key, _) in enumerate(pairs):
                    self.store.add_incoming((key, d_in), res[:, j])
                self.counts["hf_m2l"] += len(pairs)
            self._downward_children(level, [(k, d) for k in keys
                                            for d in lists.active.get(k, ())
                                            if (k, d) in self.store.incoming], "hf_l2l")

    def _downward_children(self, level: int, parents, op: str) -> None:
        """Children's incoming check potentials from the parents' incoming data."""
        if level >= self.tree.depth:
            return
        cw = self.width(level + 1)
        groups = defaultdict(list)
        for key, d in parents:
            cd = None if d is None else self._child_direction(level, d)
            for c in self.tree.nodes[key].children:
                groups[(d, cd, c.octant())].append((key, c))
        for (d, cd, o), pairs in sorted(groups.items(), key=lambda kv: _group_order(kv[0])):
            ps = self.skeleton(level, d)
            cs = self.skeleton(level + 1, cd)
            t = kernel_matrix(cs.equivalent_points + octant_offset(o, cw), ps.check_points) @ ps.D.T
            res = _apply_grouped(t, [self.store.incoming[(key, d)] for key, _ in pairs])
            for j, (_, c) in enumerate(pairs):
                self.store.add_incoming((c, cd), res[:, j])
            self.counts[op] += len(pairs)

    def _lf_downward(self) -> None:
        tree, lists, pts = self.tree, self.lists, self.tree.points
        for level in range(tree.unit_level + 1, tree.depth + 1):
            w = self.width(level)
            s = self.skeleton(level, None)
            keys = self.owned_at(level)
            groups = defaultdict(list)
            for key in keys:
                for a in lists.V.get(key, ()):
                    groups[key.offset_to(a)].append((key, a))
            for n, pairs in sorted(groups.items()):
                t = kernel_matrix(s.equivalent_points,
                                  s.equivalent_points + np.array(n, dtype=float) * w)
                res = _apply_grouped(t, [self.store.outgoing[(a, None)] for _, a in pairs])
                for j, (key, _) in enumerate(pairs):
                    self.store.add_incoming((key, None), res[:, j])
                self.counts["lf_m2l"] += len(pairs)
            for key in keys:
                xs = lists.X.get(key)
                if xs:
                    ids = np.concatenate([tree.nodes[a].point_ids for a in xs])
                    u = kernel_matrix(s.equivalent_points + self.center(key), pts[ids]) @ self.densities[ids]
                    self.store.add_incoming((key, None), u)
                    self.counts["lf_p2l"] += len(xs)
            inner = []
            for key in keys:
                if tree.nodes[key].is_leaf:
                    self._evaluate_leaf(level, key, s)
                elif (key, None) in self.store.incoming:
                    inner.append((key, None))
            self._downward_children(level, inner, "lf_l2l")

    def _evaluate_leaf(self, level: int, key: BoxKey, s: SkeletonData) -> None:
        tree, lists, pts = self.tree, self.lists, self.tree.points
        ids = tree.nodes[key].point_ids
        x = pts[ids]
        u = np.zeros(len(ids), dtype=complex)
        c = self.store.incoming.get((key, None))
        if c is not None:
            u += kernel_matrix(x, s.check_points + self.center(key)) @ (s.D.T @ c)
            self.counts["lf_l2p"] += 1
        for a in lists.W.get(key, ()):
            sa = self.skeleton(a.level, None)
            u += kernel_matrix(x, sa.equivalent_points + self.center(a)) @ self.store.outgoing[(a, None)]
            self.counts["lf_m2p"] += 1
        near = [ids] + [tree.nodes[a].point_ids for a in lists.U.get(key, ())]
        src = np.concatenate(near)
        # coincident pairs (including the self term) contribute zero
        u += kernel_matrix(x, pts[src]) @ self.densities[src]
        self.counts["p2p"] += len(near)
        self.potentials[ids] = u


def _group_order(key):
    d, cd, o = key
    return (d is not None, d or (), cd is not None, cd or (), o)


def run_sequential(cloud, tree: Octree, cache: PrecomputeCache):
    """All phases on one worker.  Returns ``(potentials, report)``."""
    from .report import RunReport

    t0 = time.perf_counter()
    engine = Engine(tree, cache, cloud.densities)
    potentials = engine.run()
    total = time.perf_counter() - t0
    report = RunReport.from_run(tree, cache, potentials, p=1, mode="seq",
                                phase_times=dict(engine.times, comm=0.0, total=total),
                                operation_counts=dict(engine.counts))
    return potentials, report
