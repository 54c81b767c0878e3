"""Translation data: directional skeletons, low-frequency surfaces, and their cache file.

Every operator is stored as ``(b, a, D)`` with points relative to the box
centre: ``b`` lies in or on the box, ``a`` lies outside it, and

    G(x, y) ~= G(x, b) @ D @ G(a, y)      (y near the box, x in the far region)

Outgoing data: potentials at ``a`` give charges ``D @ u`` at ``b``.
Incoming data (kernel symmetry): potentials at ``b`` give charges ``D.T @ u`` at ``a``.
"""

from __future__ import annotations

import io
import math
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from .core import kernel_matrix, level_of_K, rng_stream
from .errors import CacheFormatError, ConfigError, NumericalError
from .octree import ADJACENT_OFFSETS, in_parabolic_ball
from .wedges import (DirectionIndex, all_directions, canonical_direction, cube_symmetries,
                     parent_direction, wedge_axis, width_level)

RANK_CAP = 500
# source and far boxes are padded so that points on box faces are covered
BOX_PAD = 0.525
# low-frequency surfaces, as multiples of the box half-width
LF_EQUIVALENT_SCALE = 1.05
LF_CHECK_SCALE = 2.95
LF_EDGE_POINTS = {1e-4: 4, 1e-6: 6, 1e-8: 8}
CERTIFICATE_FACTOR = 100.0
CERTIFICATE_SAMPLES = 400


def _kernel_rows(x):
    return np.linalg.norm(x, axis=1)


@dataclass(eq=False)
class SkeletonData:
    equivalent_points: np.ndarray  # b, (r, 3), relative to the box centre
    check_points: np.ndarray       # a, (r, 3)
    D: np.ndarray                  # (r, r) complex
    width: float
    direction: DirectionIndex | None
    certificate: float = math.nan  # held-out relative error
    n_samples: int = 0

    @property
    def rank(self) -> int:
        return len(self.equivalent_points)

    def __eq__(self, other):
        if not isinstance(other, SkeletonData):
            return NotImplemented
        return (self.width == other.width and self.direction == other.direction
                and np.array_equal(self.equivalent_points, other.equivalent_points)
                and np.array_equal(self.check_points, other.check_points)
                and np.array_equal(self.D, other.D)
                and (self.certificate == other.certificate
                     or (math.isnan(self.certificate) and math.isnan(other.certificate)))
                and self.n_samples == other.n_samples)

    def transformed(self, g: int, direction: DirectionIndex) -> "SkeletonData":
        """Image under cube symmetry ``g``; D is unchanged because G is rotation invariant."""
        s = cube_symmetries()[g]
        return SkeletonData(self.equivalent_points @ s.T, self.check_points @ s.T, self.D,
                            self.width, direction, self.certificate, self.n_samples)


# ---------------------------------------------------------------- regions

@dataclass(frozen=True)
class CompressionRegion:
    """Far region of one wedge: a cone about ``axis`` cut by two radii and a cube.

    Points ``x`` with angle(x, axis) <= half_angle, r_in <= |x| <= r_out and
    max_i |x_i| >= cube_in.
    """

    axis: tuple[float, float, float]
    half_angle: float
    r_in: float
    cube_in: float
    r_out: float


@dataclass(frozen=True)
class _FarBounds:
    min_center: float  # min |n| over far offsets
    r_in: float        # min Euclidean distance to a padded far box
    cube_in: float     # min max-norm distance to a padded far box


def far_offsets(width: int):
    """Integer offsets of boxes outside the near field, within a window that reaches past it."""
    reach = math.ceil(0.75 * width) + 3
    adj = set(ADJACENT_OFFSETS)
    for a in range(-reach, reach + 1):
        for b in range(-reach, reach + 1):
            for c in range(-reach, reach + 1):
                n = (a, b, c)
                if n not in adj and not in_parabolic_ball(n, width):
                    yield n


def _far_bounds(width: int) -> _FarBounds:
    n = np.array(list(far_offsets(width)), dtype=float)
    gap = np.maximum(np.abs(n) - BOX_PAD, 0.0) * width
    return _FarBounds(float(np.linalg.norm(n, axis=1).min()),
                      float(np.linalg.norm(gap, axis=1).min()),
                      float(gap.max(axis=1).min()))


def _canon(d: DirectionIndex) -> DirectionIndex:
    return canonical_direction(d)[0]


def compression_regions(K: int) -> dict[DirectionIndex, CompressionRegion]:
    """Regions for the canonical wedges of every width ``1 .. sqrt(K)``.

    Radii and angles are nested top-down so that the region of a width-``w``
    wedge contains the region of every width-``2w`` wedge mapped onto it, as
    seen from any child centre.  That is what makes the upward and downward
    directional translations valid.
    """
    L = level_of_K(K)
    top = 2 ** L
    out: dict[DirectionIndex, CompressionRegion] = {}
    w = top
    r_in = cube_in = r_out = None
    alphas: dict[DirectionIndex, float] = {}
    while w >= 1:
        fb = _far_bounds(w)
        ovl = math.asin(min(1.0, math.sqrt(3.0) * BOX_PAD / fb.min_center))
        if w == top:
            r_in, cube_in, r_out = fb.r_in, fb.cube_in, 2.0 * math.sqrt(3.0) * K
            shift = None
        else:
            half_diag = math.sqrt(3.0) * w / 2.0
            shift = math.asin(min(1.0, half_diag / r_in))
            r_in = min(fb.r_in, r_in - half_diag)
            cube_in = min(fb.cube_in, cube_in - w / 2.0)
            r_out = r_out + half_diag
        if r_in <= math.sqrt(3.0) * BOX_PAD * w or cube_in <= BOX_PAD * w:
            raise NumericalError(f"width {w}: compression region overlaps the source box")
        new_alphas = {}
        for d in {_canon(d) for d in all_directions(w)}:
            axis, cap = wedge_axis(d)
            alpha = cap + ovl
            if shift is not None:
                for du in (0, 1):
                    for dv in (0, 1):
                        pd = DirectionIndex(d.width_level + 1, d.face, 2 * d.u + du, 2 * d.v + dv)
                        assert parent_direction(pd) == d
                        ang = float(np.arctan2(np.linalg.norm(np.cross(axis, wedge_axis(pd)[0])),
                                               np.dot(axis, wedge_axis(pd)[0])))
                        alpha = max(alpha, ang + alphas[_canon(pd)] + shift)
            alpha = min(alpha, math.pi)
            new_alphas[d] = alpha
            out[d] = CompressionRegion(tuple(float(x) for x in axis), alpha, r_in, cube_in, r_out)
        alphas = new_alphas
        w //= 2
    return out


# ---------------------------------------------------------------- sampling

def _rotation_to(axis: np.ndarray) -> np.ndarray:
    """Rotation taking +z onto ``axis``."""
    a = axis / np.linalg.norm(axis)
    z = np.array([0.0, 0.0, 1.0])
    c = float(a @ z)
    v = np.cross(z, a)
    s = float(np.linalg.norm(v))
    if s < 1e-15:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    v /= s
    kx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + s * kx + (1 - c) * kx @ kx


def sample_box(rng, half_width: float, n: int) -> np.ndarray:
    """Half uniform in the cube, half uniform on its surface."""
    m = n // 2
    vol = rng.uniform(-half_width, half_width, (n - m, 3))
    surf = rng.uniform(-half_width, half_width, (m, 3))
    axis = rng.integers(0, 3, m)
    surf[np.arange(m), axis] = rng.choice((-half_width, half_width), m)
    return np.concatenate([vol, surf])


def sample_region(rng, region: CompressionRegion, n: int) -> np.ndarray:
    """Directions uniform on the cap, ``1/r`` uniform; rejects points inside the cube bound."""
    rot = _rotation_to(np.array(region.axis))
    out, have = [], 0
    cos_a = math.cos(region.half_angle)
    while have < n:
        m = 2 * (n - have) + 16
        z = rng.uniform(cos_a, 1.0, m)
        phi = rng.uniform(0.0, 2 * np.pi, m)
        s = np.sqrt(np.maximum(0.0, 1 - z * z))
        d = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1) @ rot.T
        r = 1.0 / rng.uniform(1.0 / region.r_out, 1.0 / region.r_in, m)
        x = d * r[:, None]
        x = x[np.abs(x).max(axis=1) >= region.cube_in]
        out.append(x)
        have += len(x)
    return np.concatenate(out)[:n]


# ---------------------------------------------------------------- skeletons

def rank_guess(epsilon: float) -> int:
    return int(math.ceil(30.0 * math.log10(1.0 / epsilon)))


def _revealed_rank(m: np.ndarray, epsilon: float):
    _, r, piv = sla.qr(m, mode="economic", pivoting=True)
    dg = np.abs(np.diag(r))
    if dg[0] == 0.0:
        raise NumericalError("sampled interaction matrix is zero")
    return int(np.sum(dg > epsilon * dg[0])), piv


def _skeletonize(Y: np.ndarray, X: np.ndarray, epsilon: float):
    """Pivoted QR on the sampled matrix and its transpose; returns (b, a, D)."""
    m = kernel_matrix(X, Y) * _kernel_rows(X)[:, None]
    rc, pc = _revealed_rank(m, epsilon)
    rr, pr = _revealed_rank(m.T, epsilon)
    r = max(rc, rr)
    q, p = np.sort(pc[:r]), np.sort(pr[:r])
    c = m[:, q]
    z = sla.lstsq(c, m, lapack_driver="gelsd")[0]
    D = z @ np.linalg.pinv(kernel_matrix(X[p], Y))
    return Y[q], X[p], D


def directional_certificate(skel: SkeletonData, region: CompressionRegion, rng) -> float:
    """Relative error of the skeleton-mediated far field for random box charges."""
    n = CERTIFICATE_SAMPLES
    Y = sample_box(rng, BOX_PAD * skel.width, n)
    X = sample_region(rng, region, n)
    f = rng.standard_normal(n)
    exact = kernel_matrix(X, Y) @ f
    approx = kernel_matrix(X, skel.equivalent_points) @ (skel.D @ (kernel_matrix(skel.check_points, Y) @ f))
    return float(np.linalg.norm(exact - approx) / np.linalg.norm(exact))


def build_directional_skeleton(width, direction: DirectionIndex, epsilon: float, seed: int,
                               K: int, region: CompressionRegion | None = None) -> SkeletonData:
    """Directional skeleton for boxes of ``width`` in wedge ``direction`` of a size-``K`` problem."""
    if width < 1 or width_level(width) != direction.width_level:
        raise ConfigError(f"width {width} does not match direction {direction}")
    if region is None:
        rep, g = canonical_direction(direction)
        if rep != direction:
            return build_directional_skeleton(width, rep, epsilon, seed, K).transformed(g, direction)
        region = compression_regions(K)[direction]
    name = f"skeleton/{direction.width_level}/{direction.face}/{direction.u}/{direction.v}"
    n = max(8 * rank_guess(epsilon), 400)
    for attempt in range(2):
        rng = rng_stream(seed, f"{name}/{attempt}")
        Y = sample_box(rng, BOX_PAD * width, n)
        X = sample_region(rng, region, n)
        b, a, D = _skeletonize(Y, X, epsilon)
        if len(b) > RANK_CAP:
            raise NumericalError(f"separation rank {len(b)} exceeds cap {RANK_CAP} at width "
                                 f"{width}; use a larger epsilon")
        skel = SkeletonData(b, a, D, float(width), direction, n_samples=n)
        skel.certificate = directional_certificate(skel, region, rng_stream(seed, f"{name}/cert"))
        if skel.certificate <= 10 * epsilon and 3 * len(b) <= n:
            break
        n *= 2
    if not np.all(np.isfinite(skel.D)):
        raise NumericalError(f"non-finite translation matrix at width {width}")
    return skel


def cube_surface(m: int) -> np.ndarray:
    """Grid points on the surface of ``[-1, 1]**3``, ``m`` per edge: ``6 (m-1)**2 + 2`` points."""
    g = np.linspace(-1.0, 1.0, m)
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1).reshape(-1, 3)
    return pts[np.abs(pts).max(axis=1) == 1.0]


def lf_edge_points(epsilon: float) -> int:
    for eps, m in sorted(LF_EDGE_POINTS.items(), reverse=True):
        if epsilon >= eps * 0.999:
            return m
    return 10


def build_lowfreq_surfaces(width, epsilon: float) -> SkeletonData:
    """Equivalent surface at ``1.05 h`` and check surface at ``2.95 h`` (``h`` the half-width)."""
    if not 0 < width < 1:
        raise ConfigError(f"low-frequency surfaces need width < 1, got {width}")
    h = 0.5 * width
    s = cube_surface(lf_edge_points(epsilon))
    b, a = LF_EQUIVALENT_SCALE * h * s, LF_CHECK_SCALE * h * s
    m = kernel_matrix(a, b)
    D = np.linalg.pinv(m, rcond=epsilon ** 2, hermitian=False)
    if not np.all(np.isfinite(D)):
        raise NumericalError(f"low-frequency surfaces at width {width} are ill-conditioned")
    return SkeletonData(b, a, D, float(width), None)


def lowfreq_certificate(skel: SkeletonData, rng) -> float:
    """Outgoing field of random box charges at non-adjacent targets (max-norm >= 3h)."""
    h = 0.5 * skel.width
    n = CERTIFICATE_SAMPLES
    Y = rng.uniform(-h, h, (n, 3))
    t = rng.uniform(-1.0, 1.0, (n, 3))
    t /= np.abs(t).max(axis=1, keepdims=True)
    X = t * (h * rng.uniform(3.0, 9.0, n))[:, None]
    f = rng.standard_normal(n)
    exact = kernel_matrix(X, Y) @ f
    approx = kernel_matrix(X, skel.equivalent_points) @ (skel.D @ (kernel_matrix(skel.check_points, Y) @ f))
    return float(np.linalg.norm(exact - approx) / np.linalg.norm(exact))


# ---------------------------------------------------------------- cache

CACHE_MAGIC = b"DFMMCACH"
CACHE_VERSION = 1
_HEADER = struct.Struct("<8sIdIQI")
_REC = struct.Struct("<BiBHHIIdQ")


class PrecomputeCache:
    """Translation data for one (K, epsilon, seed).

    Directional entries are stored for one representative per cube-symmetry
    orbit; ``directional`` returns any wedge by applying the symmetry.
    """

    def __init__(self, K: int, epsilon: float, seed: int,
                 directional: dict[DirectionIndex, SkeletonData] | None = None,
                 lowfreq: dict[int, SkeletonData] | None = None):
        self.K = int(K)
        self.epsilon = float(epsilon)
        self.seed = int(seed)
        self._dir = dict(directional or {})
        self._lf = dict(lowfreq or {})  # keyed by depth d: width 2**-d
        self._derived: dict[DirectionIndex, SkeletonData] = {}
        self._lock = threading.Lock()

    @property
    def L(self) -> int:
        return level_of_K(self.K)

    @property
    def top_width(self) -> int:
        return 2 ** self.L

    def directional(self, width, direction: DirectionIndex) -> SkeletonData:
        if direction in self._dir:
            return self._dir[direction]
        with self._lock:
            if direction not in self._derived:
                rep, g = canonical_direction(direction)
                if rep not in self._dir:
                    raise ConfigError(f"cache has no data for width {width}, direction {direction}")
                self._derived[direction] = self._dir[rep].transformed(g, direction)
            return self._derived[direction]

    def lowfreq(self, width) -> SkeletonData:
        d = int(round(-math.log2(width)))
        try:
            return self._lf[d]
        except KeyError:
            raise ConfigError(f"cache has no low-frequency data for width {width}") from None

    def ensure_lowfreq(self, depth: int) -> None:
        """Add surfaces for widths down to ``2**-depth``; deterministic, no randomness."""
        for d in range(1, depth + 1):
            if d not in self._lf:
                self._lf[d] = build_lowfreq_surfaces(2.0 ** -d, self.epsilon)

    @property
    def lowfreq_depth(self) -> int:
        return max(self._lf, default=0)

    def stored(self):
        """Every stored entry, directional first, in key order."""
        for d in sorted(self._dir):
            yield self._dir[d]
        for d in sorted(self._lf):
            yield self._lf[d]

    def rank_table(self) -> dict[float, int]:
        """Largest separation rank per box width (low-frequency widths included)."""
        out: dict[float, int] = {}
        for s in self.stored():
            out[s.width] = max(out.get(s.width, 0), s.rank)
        return dict(sorted(out.items()))

    def directional_ranks(self) -> dict[int, int]:
        return {int(w): r for w, r in self.rank_table().items() if w >= 1}

    def __eq__(self, other):
        if not isinstance(other, PrecomputeCache):
            return NotImplemented
        return (self.K == other.K and self.epsilon == other.epsilon and self.seed == other.seed
                and self._dir == other._dir and self._lf == other._lf)

    def verify(self) -> dict[str, float]:
        """Re-run a fresh held-out certificate on every stored entry.

        Returns ``{entry name: relative error}``; compare against ``100 * epsilon``.
        """
        regions = compression_regions(self.K)
        out = {}
        for s in self.stored():
            if s.direction is None:
                name = f"lf/{s.width}"
                err = lowfreq_certificate(s, rng_stream(self.seed, f"verify/{name}"))
            else:
                d = s.direction
                name = f"hf/{d.width_level}/{d.face}/{d.u}/{d.v}"
                err = directional_certificate(s, regions[d], rng_stream(self.seed, f"verify/{name}"))
            out[name] = err
        return out


def precompute(K: int, epsilon: float, seed: int = 0, lowfreq_depth: int = 3,
               progress=None) -> PrecomputeCache:
    level_of_K(K)
    regions = compression_regions(K)
    entries = {}
    for d in sorted(regions):
        entries[d] = build_directional_skeleton(d.width, d, epsilon, seed, K, region=regions[d])
        if progress:
            progress(d, entries[d])
    cache = PrecomputeCache(K, epsilon, seed, entries)
    cache.ensure_lowfreq(lowfreq_depth)
    for d in range(1, lowfreq_depth + 1):
        s = cache.lowfreq(2.0 ** -d)
        s.certificate = lowfreq_certificate(s, rng_stream(seed, f"lf-cert/{d}"))
    return cache


def _write_array(fh, arr, dtype):
    fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def save_cache(cache: PrecomputeCache, path) -> int:
    """Write the cache; returns the file size in bytes."""
    records = []
    for s in cache.stored():
        buf = io.BytesIO()
        if s.direction is None:
            head = (1, -int(round(-math.log2(s.width))), 0, 0, 0)
        else:
            d = s.direction
            head = (0, d.width_level, d.face, d.u, d.v)
        buf.write(_REC.pack(*head, len(s.equivalent_points), len(s.check_points),
                            s.certificate, s.n_samples))
        _write_array(buf, s.equivalent_points, "<f8")
        _write_array(buf, s.check_points, "<f8")
        _write_array(buf, s.D, "<c16")
        records.append(buf.getvalue())
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, cache.epsilon, cache.K, cache.seed,
                              len(records)))
        for r in records:
            fh.write(struct.pack("<Q", len(r)))
            fh.write(r)
    return Path(path).stat().st_size


def load_cache(path) -> PrecomputeCache:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CacheFormatError(f"{path}: truncated header")
    magic, version, eps, K, seed, n = _HEADER.unpack_from(data)
    if magic != CACHE_MAGIC:
        raise CacheFormatError(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise CacheFormatError(f"{path}: format version {version}, expected {CACHE_VERSION}")
    off = _HEADER.size
    directional, lowfreq = {}, {}
    for _ in range(n):
        if off + 8 > len(data):
            raise CacheFormatError(f"{path}: truncated record table")
        (size,) = struct.unpack_from("<Q", data, off)
        off += 8
        if off + size > len(data):
            raise CacheFormatError(f"{path}: truncated record")
        kind, wl, face, u, v, ne, nc, cert, ns = _REC.unpack_from(data, off)
        p = off + _REC.size
        if size != _REC.size + 24 * (ne + nc) + 16 * ne * nc:
            raise CacheFormatError(f"{path}: record length mismatch")
        b = np.frombuffer(data, "<f8", 3 * ne, p).reshape(ne, 3).astype(float)
        p += 24 * ne
        a = np.frombuffer(data, "<f8", 3 * nc, p).reshape(nc, 3).astype(float)
        p += 24 * nc
        D = np.frombuffer(data, "<c16", ne * nc, p).reshape(ne, nc).astype(complex)
        if kind == 0:
            d = DirectionIndex(wl, face, u, v)
            directional[d] = SkeletonData(b, a, D, float(2 ** wl), d, cert, ns)
        elif kind == 1:
            lowfreq[-wl] = SkeletonData(b, a, D, 2.0 ** wl, None, cert, ns)
        else:
            raise CacheFormatError(f"{path}: unknown record kind {kind}")
        off += size
    if off != len(data):
        raise CacheFormatError(f"{path}: {len(data) - off} trailing bytes")
    return PrecomputeCache(K, eps, seed, directional, lowfreq)
