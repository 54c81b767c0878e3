"""Hybrid octree and interaction lists.

Boxes of width >= 1 (high-frequency) are refined uniformly wherever they hold
points; boxes of width < 1 are refined adaptively up to ``leaf_capacity``.
Empty boxes are never created.

High-frequency near fields combine the parabolic ball (radius ``3 w**2 / 4``)
with the 27-box neighbourhood.  Low-frequency boxes use the usual adaptive
U/V/W/X lists.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import NamedTuple

import numpy as np

from .core import ProblemConfig
from .errors import ConfigError
from .geometry import PointCloud
from .wedges import DirectionIndex, assign_direction, parent_direction

# refinement stops here even if a leaf is still over capacity (coincident points)
MAX_LF_DEPTH = 12


class BoxKey(NamedTuple):
    level: int
    i: int
    j: int
    k: int

    @property
    def index(self) -> tuple[int, int, int]:
        return (self.i, self.j, self.k)

    def parent(self) -> "BoxKey":
        if self.level == 0:
            raise ValueError("the root has no parent")
        return BoxKey(self.level - 1, self.i >> 1, self.j >> 1, self.k >> 1)

    def child(self, octant: int) -> "BoxKey":
        return BoxKey(self.level + 1, 2 * self.i + (octant >> 2 & 1),
                      2 * self.j + (octant >> 1 & 1), 2 * self.k + (octant & 1))

    def octant(self) -> int:
        return (self.i & 1) << 2 | (self.j & 1) << 1 | (self.k & 1)

    def ancestor(self, level: int) -> "BoxKey":
        s = self.level - level
        if s < 0:
            raise ValueError("ancestor level below box level")
        return BoxKey(level, self.i >> s, self.j >> s, self.k >> s)

    def width(self, K) -> float:
        return K / 2.0 ** self.level

    def center(self, K) -> np.ndarray:
        w = self.width(K)
        return -0.5 * K + (np.array(self.index, dtype=float) + 0.5) * w

    def offset_to(self, other: "BoxKey") -> tuple[int, int, int]:
        """Integer offset ``other - self`` in units of the (shared) box width."""
        return (other.i - self.i, other.j - self.j, other.k - self.k)

    def morton(self) -> int:
        return _spread(self.i) << 2 | _spread(self.j) << 1 | _spread(self.k)

    def sort_key(self):
        return (self.level, self.morton())


def _spread(x: int) -> int:
    out = 0
    for b in range(21):
        out |= ((x >> b) & 1) << (3 * b)
    return out


def octant_offset(octant: int, child_width: float) -> np.ndarray:
    """Child centre minus parent centre for ``octant``."""
    bits = np.array([octant >> 2 & 1, octant >> 1 & 1, octant & 1], dtype=float)
    return (bits - 0.5) * child_width


def adjacent(a: BoxKey, b: BoxKey) -> bool:
    """Closed boxes touch (share at least a corner) and are not the same box."""
    if a == b:
        return False
    if a.level < b.level:
        a, b = b, a
    s = a.level - b.level
    for ia, ib in zip(a.index, b.index):
        lo, hi = ib << s, (ib + 1) << s
        if ia + 1 < lo or ia > hi:
            return False
    return True


@dataclass
class OctreeNode:
    key: BoxKey
    point_ids: np.ndarray  # held for every box; leaves own exactly these points
    children: tuple[BoxKey, ...]
    regime: str  # "high" or "low"

    @property
    def is_leaf(self) -> bool:
        return not self.children


# ---------------------------------------------------------------- near fields

def _m(n: int) -> int:
    return max(2 * abs(n) - 1, 0)


def in_parabolic_ball(offset, width) -> bool:
    """Box at integer ``offset`` meets the closed ball of radius ``3 w**2 / 4``.

    Distance from the centre to the box is ``w/2 * sqrt(sum m_i**2)``, so the
    test ``4 sum m_i**2 <= 9 w**2`` is exact in integers.
    """
    return 4 * sum(_m(n) ** 2 for n in offset) <= 9 * width * width


@lru_cache(maxsize=None)
def parabolic_offsets(width: int, grid: int) -> tuple[tuple[int, int, int], ...]:
    r = grid - 1
    out = []
    for a in range(-r, r + 1):
        if 4 * _m(a) ** 2 > 9 * width * width:
            continue
        for b in range(-r, r + 1):
            for c in range(-r, r + 1):
                if in_parabolic_ball((a, b, c), width):
                    out.append((a, b, c))
    return tuple(out)


ADJACENT_OFFSETS = tuple((a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1)
                         for c in (-1, 0, 1))


def _shift(key: BoxKey, off) -> BoxKey | None:
    g = 1 << key.level
    i, j, k = key.i + off[0], key.j + off[1], key.k + off[2]
    if 0 <= i < g and 0 <= j < g and 0 <= k < g:
        return BoxKey(key.level, i, j, k)
    return None


def near_field(key: BoxKey, K: int) -> set[BoxKey]:
    """Same-level boxes meeting the closed ball of radius ``3 w**2 / 4`` about the centre.

    Includes empty boxes; only defined for width ``w >= 1``.
    """
    w = key.width(K)
    if w < 1:
        raise ValueError("parabolic near field is only defined for width >= 1; "
                         "use the adjacency rule for low-frequency boxes")
    out = set()
    for off in parabolic_offsets(int(w), 1 << key.level):
        nb = _shift(key, off)
        if nb is not None:
            out.add(nb)
    return out


def hf_near(key: BoxKey, K: int) -> set[BoxKey]:
    """Near field used by the lists: the parabolic ball plus the 27 neighbours.

    The corner neighbours of a width-1 box lie outside the ball yet touch the
    box, so they can never be compressed.
    """
    out = near_field(key, K)
    for off in ADJACENT_OFFSETS:
        nb = _shift(key, off)
        if nb is not None:
            out.add(nb)
    return out


# ---------------------------------------------------------------- tree

@dataclass
class Octree:
    config: ProblemConfig
    points: np.ndarray
    nodes: dict[BoxKey, OctreeNode]
    levels: list[list[BoxKey]]  # non-empty boxes per level, Morton order

    @property
    def K(self) -> int:
        return self.config.K

    @property
    def unit_level(self) -> int:
        """Level whose boxes have width 1."""
        return 2 * self.config.L

    @property
    def partition_level(self) -> int:
        """Level whose boxes have width sqrt(K)."""
        return self.config.L

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    def width(self, level: int) -> float:
        return self.K / 2.0 ** level

    def is_high(self, key: BoxKey) -> bool:
        return key.level <= self.unit_level

    def leaves(self) -> list[BoxKey]:
        return [k for lvl in self.levels for k in lvl if self.nodes[k].is_leaf]

    def __contains__(self, key) -> bool:
        return key in self.nodes

    def __getitem__(self, key) -> OctreeNode:
        return self.nodes[key]

    @cached_property
    def lists(self) -> "InteractionLists":
        return interaction_lists(self)

    def dump_jsonl(self, path) -> None:
        """Debug dump: one JSON object per box."""
        with open(path, "w") as fh:
            for lvl in self.levels:
                for key in lvl:
                    node = self.nodes[key]
                    fh.write(json.dumps({
                        "level": key.level, "index": list(key.index),
                        "regime": node.regime, "leaf": node.is_leaf,
                        "n_points": int(len(node.point_ids)),
                    }) + "\n")


def build_octree(cloud: PointCloud, config: ProblemConfig) -> Octree:
    K = config.K
    if cloud.K != K:
        raise ConfigError(f"cloud was built for K={cloud.K}, config has K={K}")
    pts = cloud.points
    half = 0.5 * K
    if len(pts) and np.abs(pts).max() > half:
        bad = int(np.argmax(np.abs(pts).max(axis=1)))
        raise ConfigError(f"point {bad} at {pts[bad].tolist()} lies outside [-{half}, {half}]^3")

    unit_level = 2 * config.L
    nodes: dict[BoxKey, OctreeNode] = {}
    levels: list[list[BoxKey]] = []
    frontier = {BoxKey(0, 0, 0, 0): np.arange(len(pts))} if len(pts) else {}
    level = 0
    while frontier:
        keys = sorted(frontier, key=BoxKey.morton)
        levels.append(keys)
        w = K / 2.0 ** level
        nxt = {}
        for key in keys:
            ids = frontier[key]
            high = level <= unit_level
            split = high or (len(ids) > config.leaf_capacity
                             and level < unit_level + MAX_LF_DEPTH)
            children = ()
            if split:
                cw = 0.5 * w
                g = 1 << (level + 1)
                idx = np.clip(np.floor((pts[ids] + half) / cw).astype(np.int64), 0, g - 1)
                idx = np.maximum(idx, 2 * np.array(key.index))
                idx = np.minimum(idx, 2 * np.array(key.index) + 1)
                octs = ((idx[:, 0] & 1) << 2) | ((idx[:, 1] & 1) << 1) | (idx[:, 2] & 1)
                kids = []
                for o in range(8):
                    sel = ids[octs == o]
                    if len(sel):
                        c = key.child(o)
                        nxt[c] = sel
                        kids.append(c)
                children = tuple(kids)
            nodes[key] = OctreeNode(key, ids, children, "high" if high else "low")
        frontier = nxt
        level += 1
    return Octree(config, pts, nodes, levels)


# ---------------------------------------------------------------- lists

@dataclass
class InteractionLists:
    # high frequency: B -> {direction of B's wedge holding A: [A, ...]}
    hf: dict[BoxKey, dict[DirectionIndex, list[BoxKey]]] = field(default_factory=dict)
    # directions in which B needs outgoing and incoming directional data
    active: dict[BoxKey, tuple[DirectionIndex, ...]] = field(default_factory=dict)
    V: dict[BoxKey, list[BoxKey]] = field(default_factory=dict)
    U: dict[BoxKey, list[BoxKey]] = field(default_factory=dict)
    W: dict[BoxKey, list[BoxKey]] = field(default_factory=dict)
    X: dict[BoxKey, list[BoxKey]] = field(default_factory=dict)

    def hf_members(self, key: BoxKey) -> list[BoxKey]:
        return [a for group in self.hf.get(key, {}).values() for a in group]

    def lf_members(self, key: BoxKey) -> list[BoxKey]:
        """Every box that feeds ``key`` through a low-frequency translation or a direct sum."""
        return (self.V.get(key, []) + self.X.get(key, []) + self.W.get(key, [])
                + self.U.get(key, []))


@lru_cache(maxsize=None)
def _assign(width: int, offset: tuple[int, int, int]) -> DirectionIndex:
    return assign_direction(width, offset)


def direction_of(width: int, offset) -> DirectionIndex:
    """Wedge of a width-``width`` box containing the box at integer ``offset``."""
    return _assign(int(width), tuple(int(x) for x in offset))


def interaction_lists(tree: Octree) -> InteractionLists:
    out = InteractionLists()
    nodes, K = tree.nodes, tree.K

    # high frequency: I^B = children(hf_near(P)) \ hf_near(B)
    for level in range(1, min(tree.unit_level, tree.depth) + 1):
        w = int(tree.width(level))
        parent_near: dict[BoxKey, set[BoxKey]] = {}
        for key in tree.levels[level]:
            p = key.parent()
            if p not in parent_near:
                parent_near[p] = {c for nb in hf_near(p, K) if nb in nodes
                                  for c in nodes[nb].children}
            near = hf_near(key, K)
            groups: dict[DirectionIndex, list[BoxKey]] = {}
            for a in sorted(parent_near[p] - near, key=BoxKey.morton):
                groups.setdefault(direction_of(w, key.offset_to(a)), []).append(a)
            if groups:
                out.hf[key] = dict(sorted(groups.items()))

    # active directions, top-down
    for level in range(1, min(tree.unit_level, tree.depth) + 1):
        for key in tree.levels[level]:
            dirs = set(out.hf.get(key, {}))
            if level > 1:
                dirs.update(parent_direction(d) for d in out.active.get(key.parent(), ()))
            if dirs:
                out.active[key] = tuple(sorted(dirs))

    # low frequency: V (same level), U/W (leaves), X (inverse of W)
    for level in range(tree.unit_level + 1, tree.depth + 1):
        for key in tree.levels[level]:
            p = key.parent()
            v = []
            for off in ADJACENT_OFFSETS:
                pc = _shift(p, off)
                if pc is None or pc not in nodes:
                    continue
                for c in nodes[pc].children:
                    if c != key and not adjacent(c, key):
                        v.append(c)
            if v:
                out.V[key] = sorted(v, key=BoxKey.morton)
            if nodes[key].is_leaf:
                u, wl = _leaf_neighbours(tree, key)
                out.U[key] = u
                if wl:
                    out.W[key] = wl

    # symmetrize U (coarser adjacent leaves are not reached by the descent)
    for b, us in list(out.U.items()):
        for a in us:
            if b not in out.U[a]:
                out.U[a].append(b)
    for b in out.U:
        out.U[b] = sorted(set(out.U[b]), key=BoxKey.sort_key)
    for b, ws in out.W.items():
        for a in ws:
            out.X.setdefault(a, []).append(b)
    for a in out.X:
        out.X[a] = sorted(out.X[a], key=BoxKey.sort_key)
    return out


def _leaf_neighbours(tree: Octree, key: BoxKey) -> tuple[list[BoxKey], list[BoxKey]]:
    """Adjacent leaves at the same or finer levels, and the W list of a leaf."""
    nodes = tree.nodes
    u, wl = [], []
    stack = []
    for off in ADJACENT_OFFSETS:
        nb = _shift(key, off)
        if nb is not None and nb != key and nb in nodes:
            stack.append(nb)
    while stack:
        c = stack.pop()
        if nodes[c].is_leaf:
            u.append(c)
            continue
        for g in nodes[c].children:
            if adjacent(g, key):
                stack.append(g)
            else:
                wl.append(g)
    return sorted(u, key=BoxKey.sort_key), sorted(wl, key=BoxKey.sort_key)
