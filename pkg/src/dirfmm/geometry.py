"""Input point clouds: triangle meshes, the analytic sphere, and a binary dump format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import rng_stream
from .errors import ConfigError


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray   # (nv, 3)
    triangles: np.ndarray  # (nt, 3) vertex indices

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t) == 0 or len(v) == 0:
            raise ConfigError("mesh has no triangles")
        if t.min() < 0 or t.max() >= len(v):
            raise ConfigError("triangle vertex index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.areas().sum())

    def normalized(self) -> "TriangleMesh":
        """Center the bounding box at the origin and scale into the ball of radius 1/2."""
        v = self.vertices
        center = 0.5 * (v.min(axis=0) + v.max(axis=0))
        v = v - center
        r = np.linalg.norm(v, axis=1).max()
        if r == 0.0:
            raise ConfigError("mesh is degenerate (all vertices coincide)")
        return TriangleMesh(v * (0.5 / r), self.triangles)


def load_obj(path) -> TriangleMesh:
    """Read the ``v``/``f`` records of an ASCII OBJ file and normalize the mesh.

    Faces with more than three vertices are fan-triangulated; texture and
    normal indices (``f 1/2/3``) are ignored.
    """
    verts, tris = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise ConfigError(f"{path}:{lineno}: face with fewer than 3 vertices")
                for k in range(1, len(idx) - 1):
                    tris.append([idx[0], idx[k], idx[k + 1]])
    if not tris:
        raise ConfigError(f"{path}: no faces found")
    mesh = TriangleMesh(np.array(verts), np.array(tris))
    if np.any(mesh.areas() <= 0.0):
        mesh = TriangleMesh(mesh.vertices, mesh.triangles[mesh.areas() > 0.0])
    return mesh.normalized()


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
        for a, b, c in mesh.triangles + 1:
            fh.write(f"f {a} {b} {c}\n")


@dataclass
class PointCloud:
    points: np.ndarray     # (N, 3)
    densities: np.ndarray  # (N,) complex
    K: float

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=float).reshape(-1, 3)
        self.densities = np.ascontiguousarray(self.densities, dtype=complex).reshape(-1)
        if len(self.points) != len(self.densities):
            raise ConfigError("points and densities differ in length")
        if not np.all(np.isfinite(self.points)):
            raise ConfigError("non-finite point coordinates")

    def __len__(self):
        return len(self.points)

    def with_densities(self, densities) -> "PointCloud":
        return PointCloud(self.points, densities, self.K)


def target_count(area: float, points_per_wavelength: float) -> int:
    return int(round(area * points_per_wavelength ** 2))


def _standard_normal_densities(seed, n) -> np.ndarray:
    return rng_stream(seed, "geometry.densities").standard_normal(n).astype(complex)


def sample_surface(mesh: TriangleMesh, K: float, points_per_wavelength: float,
                   seed: int) -> PointCloud:
    """Sample ``round(area(K*S) * ppw**2)`` points uniformly on the scaled mesh."""
    if points_per_wavelength <= 0:
        raise ConfigError("points_per_wavelength must be positive")
    areas = mesh.areas() * float(K) ** 2
    n = target_count(areas.sum(), points_per_wavelength)
    rng = rng_stream(seed, "geometry.surface")
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    p = mesh.vertices[mesh.triangles[tri]] * float(K)
    pts = ((1 - r1)[:, None] * p[:, 0] + (r1 * (1 - r2))[:, None] * p[:, 1]
           + (r1 * r2)[:, None] * p[:, 2])
    return PointCloud(pts, _standard_normal_densities(seed, n), K)


def analytic_sphere(K: float, points_per_wavelength: float, seed: int) -> PointCloud:
    """Uniform samples on the sphere of radius K/2 (normalized Gaussian triples)."""
    if points_per_wavelength <= 0:
        raise ConfigError("points_per_wavelength must be positive")
    radius = 0.5 * float(K)
    n = target_count(4.0 * np.pi * radius ** 2, points_per_wavelength)
    g = rng_stream(seed, "geometry.sphere").standard_normal((n, 3))
    pts = g / np.linalg.norm(g, axis=1, keepdims=True) * radius
    return PointCloud(pts, _standard_normal_densities(seed, n), K)


def icosphere(subdivisions: int = 2) -> TriangleMesh:
    """Triangulated sphere of radius 1/2, handy as a mesh input."""
    t = (1 + 5 ** 0.5) / 2
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9),
         (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2),
         (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10),
         (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        cache, new_f = {}, []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_f += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        f = new_f
    return TriangleMesh(0.5 * np.array(verts), np.array(f))


_CLOUD_HEADER = struct.Struct("<Q")


def save_cloud(cloud: PointCloud, path) -> None:
    """Little-endian dump: u64 N, N x 3 f64 coordinates, N x 2 f64 densities."""
    with open(path, "wb") as fh:
        fh.write(_CLOUD_HEADER.pack(len(cloud)))
        fh.write(cloud.points.astype("<f8").tobytes())
        fh.write(cloud.densities.astype("<c16").tobytes())


def load_cloud(path, K: float) -> PointCloud:
    data = Path(path).read_bytes()
    if len(data) < _CLOUD_HEADER.size:
        raise ConfigError(f"{path}: truncated point cloud")
    (n,) = _CLOUD_HEADER.unpack_from(data)
    need = _CLOUD_HEADER.size + n * 24 + n * 16
    if len(data) != need:
        raise ConfigError(f"{path}: expected {need} bytes, found {len(data)}")
    off = _CLOUD_HEADER.size
    pts = np.frombuffer(data, "<f8", 3 * n, off).reshape(n, 3)
    dens = np.frombuffer(data, "<c16", n, off + 24 * n)
    return PointCloud(pts.copy(), dens.astype(complex), K)


def make_cloud(geometry: str, K: float, points_per_wavelength: float, seed: int) -> PointCloud:
    """``"sphere"`` or ``"obj:<path>"``."""
    if geometry == "sphere":
        return analytic_sphere(K, points_per_wavelength, seed)
    if geometry.startswith("obj:"):
        path = geometry[4:]
        if not Path(path).is_file():
            raise ConfigError(f"mesh file {path!r} not found")
        return sample_surface(load_obj(path), K, points_per_wavelength, seed)
    raise ConfigError(f"unknown geometry {geometry!r}; use 'sphere' or 'obj:<path>'")
