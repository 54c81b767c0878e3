import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dirfmm.core import ProblemConfig, apply_kernel, kernel, kernel_matrix, level_of_K, rng_stream
from dirfmm.errors import ConfigError

coord = st.floats(-50, 50, allow_nan=False)
point = st.tuples(coord, coord, coord)


@pytest.mark.parametrize("y, expected", [
    ((1.0, 0, 0), 1 + 0j),
    ((0.5, 0, 0), -2 + 0j),
    ((0, 0, 2.0), 0.5 + 0j),
])
def test_kernel_examples(y, expected):
    assert kernel((0, 0, 0), y) == pytest.approx(expected, abs=1e-14)


def test_kernel_coincident_points():
    with pytest.raises(ValueError):
        kernel((1, 2, 3), (1, 2, 3))


@given(point, point)
def test_kernel_magnitude_and_symmetry(x, y):
    r = np.linalg.norm(np.subtract(x, y))
    if r < 1e-6:
        return
    g = kernel(x, y)
    assert abs(g) * r == pytest.approx(1.0, rel=1e-12)
    assert g == kernel(y, x)


def test_kernel_matrix_matches_scalar_and_drops_self():
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, (7, 3))
    m = kernel_matrix(x, x)
    assert np.all(np.diag(m) == 0)
    for i in range(7):
        for j in range(7):
            if i != j:
                assert m[i, j] == pytest.approx(kernel(x[i], x[j]), rel=1e-13)


def test_kernel_matrix_close_pairs_keep_precision():
    # 2**-23 is exact at magnitude 1e3; an expanded |x|^2 + |y|^2 - 2 x.y form loses it
    x = np.array([[1e3, 1e3, 1e3]])
    y = x + np.array([[2.0 ** -23, 0, 0]])
    assert abs(kernel_matrix(x, y)[0, 0]) == pytest.approx(2.0 ** 23, rel=1e-12)


def test_apply_kernel_chunks_agree():
    rng = np.random.default_rng(1)
    t, s = rng.normal(size=(50, 3)), rng.normal(size=(40, 3))
    f = rng.normal(size=40) + 1j * rng.normal(size=40)
    assert np.allclose(apply_kernel(t, s, f), kernel_matrix(t, s) @ f, rtol=1e-13)


def test_problem_config():
    cfg = ProblemConfig(L=2)
    assert cfg.K == 16
    assert ProblemConfig.from_K(64).L == 3
    for bad in (dict(L=0), dict(L=1, epsilon=0.0), dict(L=1, epsilon=1.5),
                dict(L=1, leaf_capacity=0), dict(L=1, seed=-1)):
        with pytest.raises(ConfigError):
            ProblemConfig(**bad)
    with pytest.raises(ConfigError):
        level_of_K(8)


def test_rng_streams_are_independent_and_reproducible():
    a = rng_stream(5, "alpha").random(4)
    assert np.array_equal(a, rng_stream(5, "alpha").random(4))
    assert not np.array_equal(a, rng_stream(5, "beta").random(4))
    assert not np.array_equal(a, rng_stream(6, "alpha").random(4))


@settings(max_examples=25)
@given(st.integers(0, 2**63 - 1))
def test_rng_stream_accepts_any_unsigned_seed(seed):
    assert rng_stream(seed, "x").random() < 1.0
