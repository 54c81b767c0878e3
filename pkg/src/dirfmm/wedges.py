"""Hierarchical directional wedges built from a cube-face parameterization.

A unit direction is projected onto the cube face of its dominant axis and the
face is cut into ``w x w`` cells for boxes of width ``w``.  That gives ``6 w**2``
wedges of angular size ``O(1/w)``, and halving the cell indices maps a wedge of
a width-``2w`` box onto the wedge of its width-``w`` children that contains it.
"""

from __future__ import annotations

import itertools
from functools import lru_cache
from typing import NamedTuple

import numpy as np

# face = 2 * axis + (0 for the positive side, 1 for the negative side)
N_FACES = 6


class DirectionIndex(NamedTuple):
    width_level: int  # box width w = 2**width_level
    face: int
    u: int
    v: int

    @property
    def width(self) -> int:
        return 2 ** self.width_level


def width_level(width) -> int:
    j = int(round(np.log2(width)))
    if j < 0 or 2 ** j != width:
        raise ValueError(f"directional widths are powers of two >= 1, got {width!r}")
    return j


def face_frame(face: int):
    """Return ``(axis, sign, (t1, t2))`` for a face; tangents in increasing order."""
    axis, neg = divmod(face, 2)
    tangents = tuple(a for a in range(3) if a != axis)
    return axis, (-1.0 if neg else 1.0), tangents


def _cell(coord: float, n: int) -> int:
    # boundary points go to the lower cell: ceil(x) - 1
    x = (coord + 1.0) * 0.5 * n
    return min(max(int(np.ceil(x)) - 1, 0), n - 1)


def assign_direction(width, offset) -> DirectionIndex:
    """Wedge of a width-``width`` box that contains the direction ``offset``.

    Exact partition of the sphere; directions on a shared boundary go to the
    lexicographically smallest ``(face, u, v)``.
    """
    j = width_level(width)
    n = 2 ** j
    d = np.asarray(offset, dtype=float)
    a = np.abs(d)
    m = a.max()
    if m == 0.0 or not np.isfinite(m):
        raise ValueError("cannot assign a direction to a zero offset")
    faces = [2 * ax + (0 if d[ax] > 0 else 1) for ax in range(3) if a[ax] == m]
    face = min(faces)
    axis, _, (t1, t2) = face_frame(face)
    return DirectionIndex(j, face, _cell(d[t1] / m, n), _cell(d[t2] / m, n))


def parent_direction(direction: DirectionIndex) -> DirectionIndex:
    """Wedge of the children (width ``w/2``) containing wedge ``direction`` of width ``w``."""
    if direction.width_level < 1:
        raise ValueError("width-1 wedges have no directional children")
    return DirectionIndex(direction.width_level - 1, direction.face,
                          direction.u // 2, direction.v // 2)


def all_directions(width) -> list[DirectionIndex]:
    j = width_level(width)
    n = 2 ** j
    return [DirectionIndex(j, f, u, v)
            for f in range(N_FACES) for u in range(n) for v in range(n)]


def _face_point(face: int, s: float, t: float) -> np.ndarray:
    axis, sign, (t1, t2) = face_frame(face)
    p = np.zeros(3)
    p[axis] = sign
    p[t1] = s
    p[t2] = t
    return p


def cell_center(direction: DirectionIndex) -> np.ndarray:
    """Center of the cell on the surface of the cube ``[-1, 1]**3``."""
    n = direction.width
    return _face_point(direction.face, -1.0 + (2 * direction.u + 1) / n,
                       -1.0 + (2 * direction.v + 1) / n)


def cell_corners(direction: DirectionIndex) -> np.ndarray:
    n = direction.width
    s = (-1.0 + 2.0 * direction.u / n, -1.0 + 2.0 * (direction.u + 1) / n)
    t = (-1.0 + 2.0 * direction.v / n, -1.0 + 2.0 * (direction.v + 1) / n)
    pts = np.array([_face_point(direction.face, a, b) for a in s for b in t])
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def _angle(a, b) -> float:
    # atan2 form is accurate for both tiny and near-pi angles
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b)))


@lru_cache(maxsize=None)
def wedge_axis(direction: DirectionIndex) -> tuple[np.ndarray, float]:
    """Central direction and half-angle of the smallest cone holding the cell.

    The cell is a spherical quadrilateral bounded by great circles, so the
    smallest spherical cap through its four corners contains all of it.
    """
    c = cell_corners(direction)
    best = None
    candidates = []
    for i, k in itertools.combinations(range(4), 2):
        m = c[i] + c[k]
        candidates.append(m / np.linalg.norm(m))
    for i, k, l in itertools.combinations(range(4), 3):
        nrm = np.cross(c[k] - c[i], c[l] - c[i])
        nn = np.linalg.norm(nrm)
        if nn == 0.0:
            continue
        nrm /= nn
        if np.dot(nrm, c[i]) < 0:
            nrm = -nrm
        candidates.append(nrm)
    for ax in candidates:
        r = max(_angle(ax, p) for p in c)
        if best is None or r < best[1] - 1e-15:
            best = (ax, r)
    axis, half = best
    axis.setflags(write=False)
    return axis, half


def angle_to_axis(direction: DirectionIndex, vec) -> float:
    return _angle(wedge_axis(direction)[0], np.asarray(vec, dtype=float))


@lru_cache(maxsize=None)
def cube_symmetries() -> tuple[np.ndarray, ...]:
    """The 48 signed permutation matrices mapping the cube onto itself."""
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            m = np.zeros((3, 3))
            for row, (col, sg) in enumerate(zip(perm, signs)):
                m[row, col] = sg
            mats.append(m)
    return tuple(mats)


def _direction_of_face_point(p: np.ndarray, j: int) -> DirectionIndex:
    # p is the center of a cell, never on a boundary, so no tie-breaking needed
    axis = int(np.argmax(np.abs(p)))
    face = 2 * axis + (0 if p[axis] > 0 else 1)
    _, _, (t1, t2) = face_frame(face)
    n = 2 ** j
    return DirectionIndex(j, face, int(np.floor((p[t1] + 1) * 0.5 * n)),
                          int(np.floor((p[t2] + 1) * 0.5 * n)))


@lru_cache(maxsize=None)
def canonical_direction(direction: DirectionIndex) -> tuple[DirectionIndex, int]:
    """Smallest wedge in the cube-symmetry orbit and the symmetry index mapping it here.

    Returns ``(rep, g)`` with ``cube_symmetries()[g] @ cell_center(rep) == cell_center(direction)``.
    """
    target = cell_center(direction)
    orbit = {}
    for g, m in enumerate(cube_symmetries()):
        img = _direction_of_face_point(m @ target, direction.width_level)
        orbit.setdefault(img, g)
    rep = min(orbit)
    rep_center = cell_center(rep)
    for g, m in enumerate(cube_symmetries()):
        if np.array_equal(m @ rep_center, target):
            return rep, g
    raise AssertionError("cube symmetry orbit is inconsistent")
