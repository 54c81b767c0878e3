"""Direct O(N^2) summation and error estimates against it."""

from __future__ import annotations

import numpy as np

from .core import apply_kernel, rng_stream
from .errors import ConfigError

DEFAULT_SAMPLE = 200


def direct_potentials(cloud, targets=None) -> np.ndarray:
    """``u_i = sum_{j != i} G(p_i, p_j) f_j`` for ``targets`` (indices) or every point.

    Pairs at zero distance are skipped, exactly as in the fast evaluation.
    """
    idx = np.arange(len(cloud)) if targets is None else np.asarray(targets, dtype=np.int64)
    return apply_kernel(cloud.points[idx], cloud.points, cloud.densities)


def sample_targets(n: int, sample_size: int | None, seed: int) -> np.ndarray:
    if sample_size is None or sample_size >= n:
        return np.arange(n)
    if sample_size < 1:
        raise ConfigError("sample_size must be positive")
    return np.sort(rng_stream(seed, "oracle.sample").choice(n, size=sample_size, replace=False))


def error_details(fmm_potentials, cloud, sample_size: int | None = DEFAULT_SAMPLE,
                  seed: int = 0, bootstrap: int = 200) -> dict:
    """Relative l2 error on sampled targets plus a bootstrap standard error.

    With an all-zero reference the absolute norm is reported instead
    (``"relative": false``).
    """
    fmm = np.asarray(fmm_potentials)
    if sample_size is not None and sample_size > len(cloud):
        raise ConfigError(f"sample_size {sample_size} exceeds N={len(cloud)}")
    idx = sample_targets(len(cloud), sample_size, seed)
    exact = direct_potentials(cloud, idx)
    diff2 = np.abs(fmm[idx] - exact) ** 2
    ref2 = np.abs(exact) ** 2
    den = ref2.sum()
    relative = bool(den > 0)
    err = float(np.sqrt(diff2.sum() / den)) if relative else float(np.sqrt(diff2.sum()))
    stderr = 0.0
    if bootstrap > 0 and 1 < len(idx) < len(cloud) and relative:
        rng = rng_stream(seed, "oracle.bootstrap")
        b = rng.integers(0, len(idx), (bootstrap, len(idx)))
        num, dd = diff2[b].sum(axis=1), ref2[b].sum(axis=1)
        ok = dd > 0
        stderr = float(np.std(np.sqrt(num[ok] / dd[ok])))
    return {"error": err, "relative": relative, "sample_size": int(len(idx)),
            "full": bool(len(idx) == len(cloud)), "standard_error": stderr}


def validate(fmm_potentials, cloud, sample_size: int | None = DEFAULT_SAMPLE,
             seed: int = 0) -> float:
    """Relative l2 error ``|u_fmm - u_direct| / |u_direct|`` over sampled targets."""
    return error_details(fmm_potentials, cloud, sample_size, seed, bootstrap=0)["error"]
