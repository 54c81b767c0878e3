"""Shared, session-scoped problem instances.

Caches and full runs are expensive, so each (K, epsilon) cache and each
reference run is built once and reused by every test that needs it.
"""

from pathlib import Path

import pytest

from dirfmm.core import ProblemConfig
from dirfmm.geometry import analytic_sphere, make_cloud
from dirfmm.octree import build_octree
from dirfmm.pipeline import prepare_cache, solve
from dirfmm.precompute import precompute

DATA = Path(__file__).parent / "data"
TORUS = f"obj:{DATA / 'torus.obj'}"

# (K, points per wavelength) of the two reference spheres
SPHERES = {4: 10.0, 16: 4.0}


class Store:
    def __init__(self):
        self.caches = {}
        self.runs = {}

    def cache(self, K, eps):
        if (K, eps) not in self.caches:
            self.caches[(K, eps)] = precompute(K, eps, seed=0, lowfreq_depth=3)
        return self.caches[(K, eps)]

    def problem(self, K, eps=1e-4, geometry="sphere", ppw=None):
        ppw = SPHERES.get(K, 4.0) if ppw is None else ppw
        cfg = ProblemConfig.from_K(K, epsilon=eps, seed=0)
        cloud = make_cloud(geometry, K, ppw, 0)
        tree = build_octree(cloud, cfg)
        return cfg, cloud, tree

    def run(self, K, eps=1e-4, p=1, mode="seq", ppw=None):
        key = (K, eps, p, mode, ppw)
        if key not in self.runs:
            cfg, cloud, tree = self.problem(K, eps, ppw=ppw)
            cache = prepare_cache(tree, self.cache(K, eps), 0)
            u, report, tree, cache, part = solve(cloud, cfg, cache, p=p, mode=mode, tree=tree)
            self.runs[key] = dict(cloud=cloud, tree=tree, u=u, report=report, partition=part,
                                  cache=cache)
        return self.runs[key]


@pytest.fixture(scope="session")
def store():
    return Store()


@pytest.fixture(scope="session")
def small_sphere():
    """A few hundred points at K=4 with its tree and cache, for quick engine tests."""
    cfg = ProblemConfig.from_K(4, epsilon=1e-4, seed=3)
    cloud = analytic_sphere(4, 3.0, seed=3)
    tree = build_octree(cloud, cfg)
    return cfg, cloud, tree


@pytest.fixture(scope="session")
def k4_cache(store):
    return store.cache(4, 1e-4)


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")
