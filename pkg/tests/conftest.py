import numpy as np
import pytest

from pgc import DatasetMeta, GraphInstance, new_model
from pgc.regiongraph import RegionGraphSpec

TINY = DatasetMeta(3, 2, 2)


@pytest.fixture
def tiny_meta():
    return TINY


def random_graph(rng, meta, n=None):
    n = int(rng.integers(1, meta.m + 1)) if n is None else n
    return GraphInstance(tuple(int(v) for v in rng.integers(0, meta.n_x, n)),
                         tuple(int(v) for v in rng.integers(0, meta.n_a, n * (n - 1) // 2)))


def make_model(meta=TINY, mode="s_pgc", kind="bt", seed=0, n_s=3, n_i=2, n_c=3, data=None,
               ordering="bft", n_rep=2, init_scale=1.0):
    rng = np.random.default_rng(seed)
    if data is None and kind == "hclt":
        data = [random_graph(rng, meta) for _ in range(40)]
    return new_model(meta, RegionGraphSpec(kind, n_repetitions=n_rep, seed=seed + 1),
                     RegionGraphSpec(kind, n_repetitions=n_rep, seed=seed + 2), n_s=n_s, n_i=n_i,
                     n_c=n_c, mode=mode, ordering=ordering, seed=seed, data=data,
                     init_scale=init_scale)
