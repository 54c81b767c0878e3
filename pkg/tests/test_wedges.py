import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dirfmm.wedges import (DirectionIndex, all_directions, angle_to_axis, assign_direction,
                           canonical_direction, cell_center, cell_corners, cube_symmetries,
                           face_frame, parent_direction, wedge_axis)

unit = st.tuples(*[st.floats(-1, 1, allow_nan=False)] * 3).filter(
    lambda v: np.linalg.norm(v) > 1e-3)


def test_width_one_axis():
    assert assign_direction(1, (0, 0, 5)) == DirectionIndex(0, 4, 0, 0)
    assert len(all_directions(1)) == 6
    assert len(all_directions(4)) == 96


def test_boundary_tie_goes_to_lexicographically_smaller():
    # on the u boundary of the +x face
    assert assign_direction(2, (1, 0, 0.5)) == DirectionIndex(1, 0, 0, 1)
    # edge between +x and +y faces: +x (face 0) wins
    assert assign_direction(2, (1, 1, 0.3)).face == 0
    with pytest.raises(ValueError):
        assign_direction(2, (0, 0, 0))


@pytest.mark.parametrize("d, expected", [
    (DirectionIndex(1, 3, 1, 1), DirectionIndex(0, 3, 0, 0)),
    (DirectionIndex(2, 5, 3, 2), DirectionIndex(1, 5, 1, 1)),
])
def test_parent_direction_halves(d, expected):
    assert parent_direction(d) == expected


def test_parent_direction_rejects_width_one():
    with pytest.raises(ValueError):
        parent_direction(DirectionIndex(0, 0, 0, 0))


@pytest.mark.parametrize("width", [2, 4, 8])
def test_hierarchical_containment(width):
    # every boundary ray of a parent wedge lies in the closed cell of the mapped child wedge
    for d in all_directions(width):
        child = parent_direction(d)
        axis, _, (t1, t2) = face_frame(d.face)
        c = cell_corners(d)
        lo_u, hi_u = -1 + 2 * child.u / child.width, -1 + 2 * (child.u + 1) / child.width
        lo_v, hi_v = -1 + 2 * child.v / child.width, -1 + 2 * (child.v + 1) / child.width
        for a, b in itertools.combinations(range(4), 2):
            for t in np.linspace(0, 1, 9):
                ray = (1 - t) * c[a] + t * c[b]
                s_, t_ = ray[t1] / abs(ray[axis]), ray[t2] / abs(ray[axis])
                assert lo_u - 1e-12 <= s_ <= hi_u + 1e-12
                assert lo_v - 1e-12 <= t_ <= hi_v + 1e-12


@given(unit)
def test_assignment_is_exact_partition(v):
    for w in (1, 2, 4, 8):
        d = assign_direction(w, v)
        axis = d.face // 2
        assert abs(v[axis]) == max(abs(x) for x in v)
        assert 0 <= d.u < w and 0 <= d.v < w


def _worst_angle(width, n=100_000):
    v = np.random.default_rng(width).normal(size=(n, 3))
    return max(angle_to_axis(assign_direction(width, x), x) for x in v)


@pytest.mark.parametrize("width", [1, 2])
def test_angle_bound_monte_carlo(width):
    assert _worst_angle(width) <= 1.25 / width


@pytest.mark.parametrize("width", [4, 8, 16])
def test_angle_bound_large_widths(width):
    # face cells shrink like 1/w but the cap through a cell's corners tends to sqrt(2)/w
    assert _worst_angle(width, 20_000) <= np.sqrt(2) / width


def test_wedge_axis_covers_cell():
    for d in all_directions(4):
        axis, half = wedge_axis(d)
        assert np.isclose(np.linalg.norm(axis), 1.0)
        for c in cell_corners(d):
            assert np.arccos(np.clip(axis @ c, -1, 1)) <= half + 1e-12


def test_reciprocal_direction_consistency():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = tuple(rng.integers(-6, 7, 3))
        if n == (0, 0, 0):
            continue
        a = assign_direction(4, n)
        b = assign_direction(4, tuple(-x for x in n))
        # opposite offsets land on opposite faces
        assert a.face // 2 == b.face // 2 and a.face != b.face


def test_cube_symmetries():
    mats = cube_symmetries()
    assert len(mats) == 48
    assert len({m.tobytes() for m in mats}) == 48
    for m in mats:
        assert np.allclose(m @ m.T, np.eye(3))


@pytest.mark.parametrize("width, orbits", [(1, 1), (2, 1), (4, 3), (8, 10)])
def test_canonical_directions(width, orbits):
    reps = set()
    for d in all_directions(width):
        rep, g = canonical_direction(d)
        assert np.array_equal(cube_symmetries()[g] @ cell_center(rep), cell_center(d))
        reps.add(rep)
    assert len(reps) == orbits
