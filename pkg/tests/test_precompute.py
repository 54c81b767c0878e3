import itertools

import numpy as np
import pytest

from dirfmm.core import kernel_matrix, rng_stream
from dirfmm.errors import CacheFormatError, ConfigError
from dirfmm.octree import ADJACENT_OFFSETS, direction_of, in_parabolic_ball
from dirfmm.precompute import (BOX_PAD, CompressionRegion, build_directional_skeleton,
                               build_lowfreq_surfaces, compression_regions, cube_surface,
                               directional_certificate, load_cache, precompute, save_cache)
from dirfmm.wedges import DirectionIndex, all_directions, canonical_direction, cube_symmetries


@pytest.mark.parametrize("m", range(2, 9))
def test_cube_surface_count(m):
    s = cube_surface(m)
    assert len(s) == 6 * (m - 1) ** 2 + 2
    assert np.allclose(np.abs(s).max(axis=1), 1.0)


@pytest.mark.parametrize("width", [0.5, 0.25])
def test_lowfreq_unit_charge_at_centre(width):
    s = build_lowfreq_surfaces(width, 1e-4)
    h = width / 2
    charges = s.D @ kernel_matrix(s.check_points, np.zeros((1, 3)))[:, 0]
    x = np.array([[4 * h, 1.3 * h, -0.7 * h], [0, 0, -6 * h]])
    approx = kernel_matrix(x, s.equivalent_points) @ charges
    exact = kernel_matrix(x, np.zeros((1, 3)))[:, 0]
    assert np.allclose(approx, exact, rtol=2e-3)
    assert np.array_equal(s.D @ np.zeros(len(s.check_points)), np.zeros(len(s.equivalent_points)))


def test_lowfreq_rejects_high_frequency_width():
    with pytest.raises(ConfigError):
        build_lowfreq_surfaces(1.0, 1e-4)


def _in_region(x, reg: CompressionRegion, tol=1e-9):
    r = np.linalg.norm(x, axis=1)
    cos = x @ np.array(reg.axis) / r
    return ((cos >= np.cos(reg.half_angle) - tol) & (r >= reg.r_in - tol) & (r <= reg.r_out + tol)
            & (np.abs(x).max(axis=1) >= reg.cube_in - tol))


@pytest.mark.parametrize("width", [1, 2, 4])
def test_far_boxes_lie_in_their_region(width):
    """Corners of every padded far box inside the K=16 domain fall in its wedge's region."""
    K = 16
    regions = compression_regions(K)
    syms = cube_symmetries()
    g = K // width
    corners = np.array(list(itertools.product((-BOX_PAD, BOX_PAD), repeat=3)))
    adj = set(ADJACENT_OFFSETS)
    for n in itertools.product(range(-g + 1, g), repeat=3):
        if n in adj or in_parabolic_ball(n, width):
            continue
        rep, k = canonical_direction(direction_of(width, n))
        pts = (np.array(n) + corners) * width @ syms[k]  # back to the representative's frame
        assert _in_region(pts, regions[rep]).all(), n


def test_regions_shrink_angularly_with_width():
    regions = compression_regions(16)
    worst = {w: max(r.half_angle for d, r in regions.items() if d.width == w) for w in (1, 2, 4)}
    assert worst[4] < worst[2] < worst[1]
    assert all(r.r_in > np.sqrt(3) * BOX_PAD * d.width for d, r in regions.items())


def test_wrong_width_rejected():
    with pytest.raises(ConfigError):
        build_directional_skeleton(2, DirectionIndex(0, 0, 0, 0), 1e-4, 0, 16)


def test_derived_skeleton_is_valid_for_its_own_wedge():
    K, eps = 16, 1e-4
    regions = compression_regions(K)
    d = DirectionIndex(1, 3, 0, 1)
    rep, g = canonical_direction(d)
    assert rep != d
    skel = build_directional_skeleton(2, d, eps, 0, K)
    base = regions[rep]
    region = CompressionRegion(tuple(cube_symmetries()[g] @ np.array(base.axis)), base.half_angle,
                               base.r_in, base.cube_in, base.r_out)
    assert skel.direction == d
    assert directional_certificate(skel, region, rng_stream(9, "t")) <= 100 * eps
    # the unrotated data is wrong for this wedge
    wrong = build_directional_skeleton(2, rep, eps, 0, K)
    assert directional_certificate(wrong, region, rng_stream(9, "t")) > 100 * eps


def test_cache_lookup_covers_all_directions(k4_cache):
    for w in (1, 2):
        for d in all_directions(w):
            s = k4_cache.directional(w, d)
            assert s.direction == d and s.D.shape == (s.rank, s.rank)
    with pytest.raises(ConfigError):
        k4_cache.lowfreq(2.0 ** -7)


def test_cache_roundtrip(tmp_path, k4_cache):
    path = tmp_path / "c.bin"
    size = save_cache(k4_cache, path)
    assert size == path.stat().st_size
    back = load_cache(path)
    assert back == k4_cache
    raw = path.read_bytes()
    for bad, why in ((b"XXXXXXXX" + raw[8:], "magic"), (raw[:-5], "truncated"),
                     (raw + b"\0", "trailing"), (raw[:20], "truncated")):
        (tmp_path / "bad").write_bytes(bad)
        with pytest.raises(CacheFormatError, match=why):
            load_cache(tmp_path / "bad")


def test_precompute_is_deterministic(k4_cache):
    again = precompute(4, 1e-4, seed=0, lowfreq_depth=3)
    assert again == k4_cache
    other = precompute(4, 1e-4, seed=1, lowfreq_depth=1)
    assert other.directional(1, DirectionIndex(0, 0, 0, 0)) != k4_cache.directional(1, DirectionIndex(0, 0, 0, 0))


def test_tighter_tolerance_costs_more(tmp_path, store):
    loose, tight = store.cache(4, 1e-4), store.cache(4, 1e-6)
    assert save_cache(tight, tmp_path / "t") > save_cache(loose, tmp_path / "l")
    for w, r in loose.rank_table().items():
        assert tight.rank_table()[w] >= r
    assert max(tight.directional_ranks().values()) > max(loose.directional_ranks().values())


def test_certificates_recorded(k4_cache):
    for s in k4_cache.stored():
        assert s.certificate <= 10 * k4_cache.epsilon


def test_rank_envelope_at_1e4(store):
    # order-of-magnitude envelope for eps=1e-4; widths 1..4 are all a K=16 cache has
    ranks = store.cache(16, 1e-4).directional_ranks()
    assert all(40 <= r <= 100 for r in ranks.values()), ranks


def test_rank_grows_to_1e8_at_width_one():
    d = DirectionIndex(0, 0, 0, 0)
    loose = build_directional_skeleton(1, d, 1e-4, 0, 4)
    tight = build_directional_skeleton(1, d, 1e-8, 0, 4)
    assert tight.rank > loose.rank
