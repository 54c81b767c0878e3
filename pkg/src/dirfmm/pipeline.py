"""One-call driver: tree, cache, partition, and either the sequential or the parallel run."""

from __future__ import annotations

from .core import ProblemConfig
from .engine import run_sequential
from .errors import ConfigError
from .geometry import PointCloud
from .octree import Octree, build_octree
from .partition import PartitionMap, check_worker_count, partition_tree
from .precompute import PrecomputeCache, precompute
from .runtime import run_parallel


def prepare_cache(tree: Octree, cache: PrecomputeCache | None, seed: int) -> PrecomputeCache:
    cfg = tree.config
    if cache is None:
        cache = precompute(cfg.K, cfg.epsilon, seed, lowfreq_depth=0)
    elif cache.K != cfg.K or cache.epsilon != cfg.epsilon:
        raise ConfigError(f"cache is for K={cache.K}, epsilon={cache.epsilon}; run needs "
                          f"K={cfg.K}, epsilon={cfg.epsilon}")
    cache.ensure_lowfreq(tree.depth - tree.unit_level)
    return cache


def solve(cloud: PointCloud, config: ProblemConfig, cache: PrecomputeCache | None = None,
          p: int = 1, mode: str = "seq", tree: Octree | None = None,
          partition: PartitionMap | None = None):
    """Returns ``(potentials, report, tree, cache, partition)``; ``partition`` is None in seq mode."""
    tree = tree or build_octree(cloud, config)
    if mode == "seq" and p != 1:
        raise ConfigError("sequential mode runs with p=1")
    # before any precomputation, so an impossible worker count fails fast
    check_worker_count(tree, p)
    cache = prepare_cache(tree, cache, config.seed)
    if mode == "seq":
        u, report = run_sequential(cloud, tree, cache)
        return u, report, tree, cache, None
    partition = partition or partition_tree(tree, p, config.seed)
    u, report = run_parallel(cloud, tree, cache, partition, mode=mode)
    return u, report, tree, cache, partition
