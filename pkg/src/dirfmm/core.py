"""Shared primitives: the Helmholtz kernel, problem configuration and RNG streams."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

WAVENUMBER = 2.0 * np.pi

# Points are plain float64 arrays of shape (3,) or (n, 3); complex values are
# numpy complex128.  These aliases only document intent.
Point3 = np.ndarray
ComplexScalar = complex


def kernel(x, y) -> complex:
    """Helmholtz Green's function ``exp(2*pi*i*r) / r`` with ``r = |x - y|``."""
    r = float(np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(y, dtype=float)))
    if r == 0.0:
        raise ValueError("kernel is singular for coincident points")
    return complex(np.exp(1j * WAVENUMBER * r) / r)


def kernel_matrix(targets: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """Dense matrix ``G[i, j] = kernel(targets[i], sources[j])``.

    Coincident pairs are set to zero, which is how the self term is dropped
    everywhere in the package.
    """
    t = np.asarray(targets, dtype=float).reshape(-1, 3)
    s = np.asarray(sources, dtype=float).reshape(-1, 3)
    diff = t[:, None, :] - s[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    zero = d == 0.0
    if zero.any():
        d[zero] = 1.0
        out = np.exp((1j * WAVENUMBER) * d) / d
        out[zero] = 0.0
        return out
    return np.exp((1j * WAVENUMBER) * d) / d


def apply_kernel(targets, sources, charges) -> np.ndarray:
    """Potentials at ``targets`` due to ``charges`` at ``sources``, chunked."""
    t = np.asarray(targets, dtype=float).reshape(-1, 3)
    out = np.zeros(len(t), dtype=complex)
    chunk = max(1, 2_000_000 // max(1, len(sources)))
    for start in range(0, len(t), chunk):
        out[start:start + chunk] = kernel_matrix(t[start:start + chunk], sources) @ charges
    return out


@dataclass(frozen=True)
class ProblemConfig:
    """Size, accuracy and randomness of one problem instance.

    ``K = 4**L`` is the domain width in wavelengths.
    """

    L: int
    epsilon: float = 1e-4
    leaf_capacity: int = 40
    seed: int = 0

    def __post_init__(self):
        if int(self.L) != self.L or self.L < 1:
            raise ConfigError(f"L must be a positive integer, got {self.L!r}")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon!r}")
        if self.leaf_capacity < 1:
            raise ConfigError("leaf_capacity must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")

    @property
    def K(self) -> int:
        return 4 ** self.L

    @classmethod
    def from_K(cls, K: int, **kwargs) -> "ProblemConfig":
        return cls(L=level_of_K(K), **kwargs)


def level_of_K(K) -> int:
    L = 0
    while 4 ** L < K:
        L += 1
    if 4 ** L != K or L < 1:
        raise ConfigError(f"K must be a power of 4 (K = 4**L, L >= 1), got {K!r}")
    return L


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible generator for the stream ``name``.

    Counter-based (Philox) so that every named stream is fixed by the seed
    alone, independent of how many numbers other streams consumed.
    """
    digest = hashlib.blake2b(name.encode(), digest_size=8).digest()
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, int.from_bytes(digest, "little")]
    return np.random.Generator(np.random.Philox(key=key))
