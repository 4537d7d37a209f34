import itertools
import math

import numpy as np
import pytest

from pgc.graphdata import MASK, DatasetMeta
from pgc.regiongraph import (RegionGraphSpec, build_bt, build_hclt, build_lt, build_region_graph, build_rt,
                             build_rt_sync, check_partition_tree, chow_liu_edges, max_spanning_tree,
                             mutual_information, mutual_information_matrix, region_depth, synced_edge_order)


def split(root):
    """Scopes of the children of the first partition below ``root``."""
    return [list(ch.scope) for ch in root.children[0].children]


def test_bt_examples():
    assert build_bt([0]).is_leaf
    r = build_bt([0, 1, 2, 3], 2)
    assert split(r) == [[0, 1], [2, 3]]
    assert all(split(ch) == [[v] for v in ch.scope] for ch in r.children[0].children)
    assert split(build_bt([0, 1, 2])) == [[0, 1], [2]]


def test_lt_examples():
    assert build_lt([0]).is_leaf
    r = build_lt([0, 1, 2])
    assert split(r) == [[0], [1, 2]]
    assert split(r.children[0].children[1]) == [[1], [2]]
    budget = build_lt([0, 1, 2, 3], 1)
    assert split(budget) == [[0], [1, 2, 3]]
    assert split(budget.children[0].children[1]) == [[1], [2], [3]]


def test_depth_budget_factorizes():
    r = build_bt(list(range(8)), 1)
    assert region_depth(r) == 2
    assert [len(s) for s in split(r)] == [4, 4]
    assert split(r.children[0].children[0]) == [[0], [1], [2], [3]]


def test_rt():
    a = build_rt(list(range(8)), None, 1, seed=4)
    assert len(a) == 1
    b = build_rt(list(range(8)), None, 1, seed=4)
    assert [x.to_json() for x in a] == [x.to_json() for x in b]
    three = build_rt(list(range(8)), None, 3, seed=1)
    assert len(three) == 3
    for r in three:
        assert check_partition_tree(r, range(8)) == []
    leaves = lambda root: [l.scope[0] for l in root.leaves()]
    assert leaves(build_rt(list(range(8)), seed=1)[0]) != leaves(build_rt(list(range(8)), seed=2)[0])


def test_synced_edge_order():
    assert synced_edge_order([0, 1, 2, 3]) == list(range(6))
    assert synced_edge_order([2, 1, 0]) == [2, 1, 0]


def test_rt_sync():
    meta = DatasetMeta(4, 2, 2)
    nodes, edges = build_rt_sync(range(4), range(6), meta, n_repetitions=3, seed=0)
    assert len(nodes) == len(edges) == 3
    for r in nodes:
        assert check_partition_tree(r, range(4)) == []
    for r in edges:
        assert check_partition_tree(r, range(6)) == []
    with pytest.raises(ValueError):
        build_rt_sync(range(3), range(6), meta)


def test_rt_sync_shares_permutation():
    meta = DatasetMeta(4, 2, 2)
    nodes, edges = build_rt_sync(range(4), range(6), meta, n_repetitions=2, seed=7)
    rng = np.random.default_rng(7)
    for nroot, eroot in zip(nodes, edges):
        sigma = rng.permutation(4)
        assert [l.scope[0] for l in nroot.leaves()] == list(sigma)
        assert [l.scope[0] for l in eroot.leaves()] == synced_edge_order(sigma)


def test_mutual_information_examples():
    d = np.array([[0, 0], [0, 0], [1, 1], [1, 1]])
    assert mutual_information(d, 0, 1, 0.0) == pytest.approx(math.log(2), abs=1e-12)
    const = np.zeros((5, 2), dtype=int)
    assert mutual_information(const, 0, 1, 0.0) == 0.0
    with pytest.raises(ValueError):
        mutual_information(d, 1, 1)


def test_mutual_information_ignores_masked_rows():
    d = np.array([[0, 0], [0, 0], [1, 1], [1, 1], [0, MASK], [MASK, 1]])
    assert mutual_information(d, 0, 1, 0.0) == pytest.approx(math.log(2))
    assert mutual_information(np.array([[0, 1], [MASK, 0]]), 0, 1) == 0.0


def xor_free_chain():
    x0, x2 = np.meshgrid([0, 1], [0, 1])
    x0, x2 = x0.ravel(), x2.ravel()
    return np.stack([x0, 2 * x0 + x2, x2], axis=1)


def test_hclt_examples():
    d = np.array([[0, 1], [1, 0], [0, 0]])
    assert chow_liu_edges(build_hclt(d, [0, 1])) == [(0, 1)]
    data = xor_free_chain()
    mi = mutual_information_matrix(data, [0, 1, 2], 0.0)
    assert mi[0, 1] == pytest.approx(math.log(2)) and mi[1, 2] == pytest.approx(math.log(2))
    assert mi[0, 2] == pytest.approx(0.0, abs=1e-12)
    assert sorted(chow_liu_edges(build_hclt(data, [0, 1, 2], 0.0))) == [(0, 1), (1, 2)]
    star = build_hclt(np.zeros((6, 4), dtype=int), [0, 1, 2, 3])
    assert sorted(chow_liu_edges(star)) == [(0, 1), (0, 2), (0, 3)]


def test_hclt_without_data_falls_back_to_lt():
    assert build_hclt(None, [0, 1, 2]).to_json() == build_lt([0, 1, 2]).to_json()


def test_spanning_tree_is_maximum():
    rng = np.random.default_rng(0)
    for k in range(2, 7):
        w = rng.random((k, k))
        w = (w + w.T) / 2
        tree = max_spanning_tree(w)
        got = sum(w[a, b] for a, b in tree)
        best = 0.0
        for cand in itertools.combinations(itertools.combinations(range(k), 2), k - 1):
            parent = list(range(k))

            def find(x):
                while parent[x] != x:
                    x = parent[x]
                return x
            ok = True
            for a, b in cand:
                ra, rb = find(a), find(b)
                if ra == rb:
                    ok = False
                    break
                parent[ra] = rb
            if ok:
                best = max(best, sum(w[a, b] for a, b in cand))
        assert got == pytest.approx(best)


@pytest.mark.parametrize("kind", ["bt", "lt", "rt", "hclt"])
def test_partition_invariants(kind):
    rng = np.random.default_rng(3)
    data = rng.integers(0, 3, (30, 7))
    for layers in (None, 1, 2):
        roots = build_region_graph(RegionGraphSpec(kind, layers, 2, 5), list(range(7)), data)
        for r in roots:
            assert check_partition_tree(r, range(7)) == []
            assert sorted(l.scope[0] for l in r.leaves()) == list(range(7))


def test_check_partition_tree_detects_overlap():
    r = build_bt([0, 1, 2, 3])
    r.children[0].children[1].scope = (1, 3)
    assert check_partition_tree(r)


def test_spec_validation():
    with pytest.raises(ValueError):
        RegionGraphSpec("quadtree")
    with pytest.raises(ValueError):
        RegionGraphSpec("rt", n_repetitions=0)
