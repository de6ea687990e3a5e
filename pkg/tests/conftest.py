import os
from pathlib import Path

import numpy as np
import pytest

from ispsim.graph import CsrGraph, KroneckerBase, kronecker_expand, load_csr, powerlaw_graph, save_csr

CACHE_DIR = Path(os.environ.get("ISPSIM_TEST_CACHE", Path.home() / ".cache" / "ispsim-tests"))

# ~1M nodes, average degree ~101, 4-byte IDs (~413 MB on disk).
LARGE_SEED = dict(num_nodes=15625, avg_degree=30, seed=11, id_width=4)
LARGE_BASE = [[1, 1, 0, 0], [1, 0, 0, 0], [0, 0, 1, 1], [0, 0, 1, 0]]
LARGE_REPS = 3


def build_large_graph() -> CsrGraph:
    seed = powerlaw_graph(**LARGE_SEED)
    return kronecker_expand(seed, KroneckerBase.from_matrix(LARGE_BASE, reps=LARGE_REPS))


@pytest.fixture(scope="session")
def large_graph() -> CsrGraph:
    """The criterion-scale Kronecker graph, generated once and memory-mapped."""
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    path = CACHE_DIR / "kron_1m_deg101_w4.csr"
    if not path.exists():
        tmp = path.with_suffix(".tmp")
        save_csr(build_large_graph(), tmp)
        tmp.replace(path)
    return load_csr(path, mmap=True)


@pytest.fixture
def small_graph() -> CsrGraph:
    return powerlaw_graph(2000, 12, seed=3, id_width=8)


def random_graph(rng: np.random.Generator, n: int, m: int, id_width: int = 8,
                 zero_degree_frac: float = 0.1) -> CsrGraph:
    """Directed multigraph with some degree-0 nodes."""
    src = rng.integers(0, n, size=m)
    keep = rng.random(n) >= zero_degree_frac
    src = src[keep[src]]
    dst = rng.integers(0, n, size=len(src))
    return CsrGraph.from_edges(n, src, dst, id_width=id_width)
