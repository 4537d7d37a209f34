import itertools

import numpy as np
import pytest

from pgc import GraphInstance, permute
from pgc.graphdata import DataError
from pgc.metrics import (ValencyTable, adjacency_heatmap, anomaly_experiment, auc, bandwidth_weighted_mean,
                         certificate, histogram_csv, is_valid, metrics_suite)
from pgc.synthetic import chain_corpus

VT = ValencyTable()
C, N, O, F = range(4)


def mol(nodes, bonds):
    return GraphInstance.from_edges(nodes, bonds)


def test_valency_table():
    with pytest.raises(ValueError):
        ValencyTable((4,), (1, 1))
    assert ValencyTable.from_json(VT.to_json()) == VT


def test_is_valid_examples():
    assert is_valid(GraphInstance((C,), ()))
    over = mol([C, O, O, C], [[1, 0, 2], [2, 0, 2], [3, 0, 1]])
    assert not is_valid(over)
    assert not is_valid(GraphInstance((C, C), (0,)))
    assert is_valid(mol([C, O], [[1, 0, 2]]))
    with pytest.raises(DataError):
        is_valid(GraphInstance((7,), ()))


def test_is_valid_permutation_invariant():
    rng = np.random.default_rng(0)
    for _ in range(40):
        n = int(rng.integers(1, 6))
        g = GraphInstance(tuple(rng.integers(0, 4, n)), tuple(rng.integers(0, 4, n * (n - 1) // 2)))
        v = is_valid(g)
        assert all(is_valid(permute(g, p)) == v for p in itertools.permutations(range(n)))


def test_certificate_examples():
    g = mol([C, N, O, F], [[1, 0, 1], [2, 1, 2], [3, 1, 1]])
    ref = certificate(g)
    assert all(certificate(permute(g, p)) == ref for p in itertools.permutations(range(4)))
    h = mol([C, N, O, C], [[1, 0, 1], [2, 1, 2], [3, 1, 1]])
    assert certificate(h) != ref
    assert certificate(GraphInstance((2,), ())) == bytes([1, 2])


def test_certificate_stable_on_asymmetric_corpus():
    rng = np.random.default_rng(1)
    for _ in range(15):
        n = int(rng.integers(2, 5))
        g = GraphInstance(tuple(rng.permutation(4)[:n]), tuple(rng.integers(0, 3, n * (n - 1) // 2)))
        ref = certificate(g)
        assert certificate(g) == ref
        assert all(certificate(permute(g, p)) == ref for p in itertools.permutations(range(n)))


def test_metrics_suite_examples():
    good = mol([C, O], [[1, 0, 2]])
    same = metrics_suite([good] * 5, [], VT)
    assert same["unique"] == pytest.approx(100 / 5)
    assert metrics_suite([good], [good], VT)["novel"] == 0.0
    bad = GraphInstance((C, C), (0,))
    four = metrics_suite([good, good, bad, mol([F, F, F], [[1, 0, 1], [2, 1, 1]])], [], VT)
    assert (four["valid"], four["unique"], four["novel"]) == (50.0, 50.0, 100.0)
    with pytest.raises(ValueError):
        metrics_suite([], [], VT)


def test_metrics_suite_zero_denominators():
    r = metrics_suite([GraphInstance((C, C), (0,))], [], VT)
    assert (r["valid"], r["unique"], r["novel"]) == (0.0, 0.0, 0.0)
    assert r["fcd"] == "n/a"


def test_auc_examples():
    assert auc([1, 2], [0]) == 1.0
    assert auc([0], [1]) == 0.0
    assert auc([1], [1]) == 0.5
    rng = np.random.default_rng(0)
    a, b = rng.integers(0, 5, 30), rng.integers(0, 5, 20)
    assert auc(a, b) + auc(b, a) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        auc([], [1])


class LengthModel:
    """Scores graphs by node count; perfectly separates sizes."""

    def logp_many(self, graphs):
        return -np.array([g.n for g in graphs], dtype=float)


def test_anomaly_experiment():
    small = [GraphInstance((0, 1), (1,))] * 10
    large = [GraphInstance((0, 1, 0), (1, 0, 1))] * 5
    r = anomaly_experiment(LengthModel(), small, large, 0.0, seed=0)
    assert r["auc"] == 1.0 and r["n_permuted"] == 0
    assert anomaly_experiment(LengthModel(), small, large, 0.35, seed=0)["n_permuted"] == 3
    assert sum(r["hist_in"]) == 10 and sum(r["hist_out"]) == 5
    assert histogram_csv(r).startswith("bin_lo,bin_hi,count_in,count_out\n")
    with pytest.raises(ValueError):
        anomaly_experiment(LengthModel(), [], large)
    with pytest.raises(ValueError):
        anomaly_experiment(LengthModel(), small, large, 1.5)


def test_anomaly_ipgc_invariant_to_permutation():
    from conftest import make_model, random_graph
    from pgc import DatasetMeta
    meta = DatasetMeta(4, 2, 2)
    m = make_model(meta, mode="i_pgc")
    rng = np.random.default_rng(0)
    ins = [random_graph(rng, meta, 3) for _ in range(20)]
    outs = [random_graph(rng, meta, 4) for _ in range(20)]
    assert anomaly_experiment(m, ins, outs, 0.0, 1)["auc"] == pytest.approx(
        anomaly_experiment(m, ins, outs, 1.0, 1)["auc"], abs=1e-12)


def test_heatmap_examples():
    edgeless = [GraphInstance((0, 0, 0), (0, 0, 0))] * 3
    assert not adjacency_heatmap(edgeless, "bft").any()
    tri = GraphInstance((0, 0, 0), (1, 1, 1))
    h = adjacency_heatmap([tri], "bft", m=4)
    expect = np.zeros((4, 4))
    expect[:3, :3] = 1 - np.eye(3)
    assert np.array_equal(h, expect)
    assert bandwidth_weighted_mean(np.zeros((3, 3))) == 0.0


def test_heatmap_bft_tighter_than_random_on_chains():
    data = chain_corpus(np.random.default_rng(0), 300, [6, 7, 8, 9])
    rnd = bandwidth_weighted_mean(adjacency_heatmap(data, "random", 9, seed=1))
    assert bandwidth_weighted_mean(adjacency_heatmap(data, "bft", 9)) < rnd
    assert bandwidth_weighted_mean(adjacency_heatmap(data, "rcm", 9)) < rnd
