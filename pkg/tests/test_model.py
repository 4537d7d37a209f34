import itertools
import math
from collections import Counter

import numpy as np
import pytest
from scipy.special import logsumexp

from conftest import TINY, make_model, random_graph
from pgc import MASK, DatasetMeta, GraphInstance, PgcModel, QuerySpec, new_model, permute
from pgc.model import ModelError, normalize_mode
from pgc.oracle import exact_conditional, exact_distribution, oracle_perm_average, oracle_query
from pgc.regiongraph import RegionGraphSpec

MODES = ["s_pgc", "i_pgc", "factorial_pgc", "pi_pgc"]


def tv(samples, graphs, probs):
    counts = Counter(samples)
    n = len(samples)
    known = set(graphs)
    stray = sum(c for g, c in counts.items() if g not in known) / n
    return 0.5 * sum(abs(counts.get(g, 0) / n - p) for g, p in zip(graphs, probs)) + stray


def test_constructor_contract():
    m = new_model(TINY, RegionGraphSpec("bt"), RegionGraphSpec("bt"), n_c=4, mode="s_pgc")
    assert m.check() == []
    with pytest.raises(ModelError, match="cap"):
        new_model(DatasetMeta(9, 4, 4), mode="factorial_pgc")
    with pytest.raises(ModelError, match="ordering"):
        new_model(TINY, mode="pi_pgc", ordering="none")
    with pytest.raises(ModelError, match="n_c"):
        new_model(TINY, n_c=0)


def test_mode_aliases():
    assert normalize_mode("ipgc") == "i_pgc"
    assert normalize_mode("pipgc") == "pi_pgc"
    assert normalize_mode("spgc") == "s_pgc"
    assert normalize_mode("nfactpgc") == "factorial_pgc"
    with pytest.raises(ModelError):
        normalize_mode("gpgc")


@pytest.mark.parametrize("mode", MODES)
def test_all_masked_is_zero(mode):
    m = make_model(mode=mode)
    nodes, edges = np.full((1, 3), MASK), np.full((1, 3), MASK)
    assert m.fixed_logp_values(nodes, edges)[0] == pytest.approx(0.0, abs=1e-12)


def test_single_coupling_term_is_sum_of_roots():
    m = make_model(n_c=1)
    g = GraphInstance((0, 1, 1), (1, 0, 1))
    nodes, edges = np.array([g.node_labels]), np.array([g.edge_labels])
    from pgc import circuit as C
    expect = C.forward_logp(m.node_circuit, nodes)[0][0] + C.forward_logp(m.edge_circuit, edges)[0][0]
    assert m.logp_joint_fixed(g) == pytest.approx(expect, abs=1e-12)


def test_hand_built_one_node_model():
    meta = DatasetMeta(1, 2, 2)
    m = new_model(meta, n_s=1, n_i=1, n_c=2, mode="s_pgc", init_scale=0.0)
    assert m.edge_circuit is None
    # two components: tables [.2, .8] and [.6, .4], coupling [.25, .75]
    layers = m.node_circuit.layers
    layers[0].logits = np.log([[0.2, 0.8], [0.6, 0.4]])
    layers[-1].logits = np.log([[1.0, 1e-300], [1e-300, 1.0]])
    m.coupling_logits = np.log([0.25, 0.75])
    g = GraphInstance((1,), ())
    assert m.logp_joint_fixed(g) == pytest.approx(math.log(0.25 * 0.8 + 0.75 * 0.4), abs=1e-12)
    assert m.logp(g) == pytest.approx(math.log(0.5), abs=1e-12)


def test_factorial_matches_s_pgc_at_n1_and_external_average():
    s = make_model(mode="s_pgc", seed=3)
    f = PgcModel(TINY, "factorial_pgc", s.n_c, node_circuit=s.node_circuit, edge_circuit=s.edge_circuit,
                 coupling_logits=s.coupling_logits, cardinality_logits=s.cardinality_logits)
    one = GraphInstance((1,), ())
    assert f.logp(one) == pytest.approx(s.logp(one), abs=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(10):
        g = random_graph(rng, TINY)
        perms = [s.logp(permute(g, p)) for p in itertools.permutations(range(g.n))]
        assert f.logp(g) == pytest.approx(logsumexp(perms) - math.lgamma(g.n + 1), abs=1e-12)
        lpn = f.log_cardinality()[g.n - 1]
        assert f.logp(g) - lpn == pytest.approx(oracle_perm_average(f, g), abs=1e-12)


def test_factorial_cap_enforced():
    m = make_model(DatasetMeta(4, 2, 2), mode="factorial_pgc")
    m.factorial_cap = 3
    with pytest.raises(ModelError):
        m.logp(GraphInstance((0,) * 4, (0,) * 6))


@pytest.mark.parametrize("mode", ["i_pgc", "factorial_pgc"])
def test_invariant_modes(mode):
    meta = DatasetMeta(5, 3, 3)
    m = make_model(meta, mode=mode, n_s=2, n_i=2, n_c=2)
    rng = np.random.default_rng(1)
    for n in (2, 3, 4):
        g = random_graph(rng, meta, n)
        ref = m.logp(g)
        vals = m.logp_many([permute(g, p) for p in itertools.permutations(range(n))])
        assert np.max(np.abs(vals - ref)) < 1e-9


def test_pi_pgc_invariant_on_structure_determined_graph():
    meta = DatasetMeta(4, 2, 3)
    m = make_model(meta, mode="pi_pgc", ordering="rcm")
    g = GraphInstance.from_edges([0, 1, 1, 0], [[1, 0, 1], [2, 1, 2], [3, 2, 1]])
    ref = m.logp(g)
    assert all(m.logp(permute(g, p)) == ref for p in itertools.permutations(range(4)))


def test_s_pgc_is_not_invariant():
    m = make_model(mode="s_pgc")
    g = GraphInstance((0, 1, 1), (1, 0, 0))
    vals = [m.logp(permute(g, p)) for p in itertools.permutations(range(3))]
    assert max(vals) - min(vals) > 1e-3


def test_ipgc_component():
    m = make_model(mode="i_pgc", n_c=2)
    m.ipgc_node_logits[:] = 0.0
    m.ipgc_edge_logits[:] = 0.0
    two = GraphInstance((0, 1), (1,))
    assert m.logp_ipgc_component(two, 1) == pytest.approx(2 * math.log(1 / 2) + math.log(1 / 2))
    m2 = make_model(mode="i_pgc", n_c=2, seed=4)
    one = GraphInstance((1,), ())
    assert m2.logp_ipgc_component(one, 0) == pytest.approx(
        float(np.log(np.exp(m2.ipgc_node_logits[0]) / np.exp(m2.ipgc_node_logits[0]).sum())[1]))
    g = GraphInstance((0, 1, 1), (1, 0, 1))
    vals = {round(m2.logp_ipgc_component(permute(g, p), 1), 12) for p in itertools.permutations(range(3))}
    assert len(vals) == 1
    with pytest.raises(ModelError):
        make_model(mode="s_pgc").logp_ipgc_component(g, 0)


def test_ipgc_mixture_value():
    m = make_model(mode="i_pgc", n_c=3, seed=5)
    g = GraphInstance((0, 1, 1), (1, 0, 1))
    comps = [m.logp_ipgc_component(g, z) for z in range(3)]
    expect = logsumexp(np.array(comps) + m.log_coupling()) + m.log_cardinality()[2]
    assert m.logp(g) == pytest.approx(expect, abs=1e-12)


@pytest.mark.parametrize("mode", MODES)
def test_query_examples(mode):
    m = make_model(mode=mode, seed=2)
    g = GraphInstance((0, 1, 1), (1, 0, 1))
    if mode == "pi_pgc":
        g = m.canonical(g)
    q = QuerySpec.observed(g, TINY)
    assert m.query(q) == pytest.approx(m.logp(g), abs=1e-12)
    for n in (1, 2, 3):
        assert m.query(QuerySpec.marginal(n, TINY)) == pytest.approx(m.log_cardinality()[n - 1], abs=1e-12)


def test_query_observed_is_fixed_plus_cardinality_bit_exact():
    m = make_model(mode="s_pgc", seed=6)
    g = GraphInstance((1, 0), (1,))
    assert m.query(QuerySpec.observed(g, TINY)) == m.logp_joint_fixed(g) + m.log_cardinality()[1]


@pytest.mark.parametrize("mode", MODES)
def test_node_marginalization_four_nodes(mode):
    meta = DatasetMeta(4, 2, 3)
    m = make_model(meta, mode=mode, n_s=2, n_i=2, n_c=2, seed=8)
    g = GraphInstance((0, 1, 1, 0), (1, 2, 0, 0, 1, 2))
    q = QuerySpec.observed(g, meta).marginalize_node(2)
    assert q.nodes[2] == MASK and sum(q.edges[:6] == MASK) == 3
    brute = []
    for x in range(2):
        for e in itertools.product(range(3), repeat=3):
            edges = list(g.edge_labels)
            edges[1], edges[2], edges[5] = e  # (2,0), (2,1), (3,2)
            h = GraphInstance((0, 1, x, 0), tuple(edges))
            brute.append(m.logp_presorted_many([h])[0] if mode == "pi_pgc" else m.logp(h))
    assert m.query(q) == pytest.approx(logsumexp(brute), abs=1e-9)
    assert m.query(q) == pytest.approx(oracle_query(m, q), abs=1e-9)


def test_query_rejects_observed_padding():
    with pytest.raises(Exception):
        make_model().query(QuerySpec(1, np.array([0, 1, MASK]), np.full(3, MASK)))


def test_query_spec_from_json():
    q = QuerySpec.from_json('{"n": 3, "nodes": {"0": 1, "2": "marg"}, "edges": {"1,0": 1, "2": 0}}', TINY)
    assert q.nodes.tolist() == [1, MASK, MASK]
    assert q.edges.tolist() == [1, MASK, 0]
    with pytest.raises(Exception):
        QuerySpec.from_json('{"n": 2, "nodes": {"2": 1}}', TINY)


def test_lower_bound_ordering():
    s = make_model(mode="s_pgc", seed=9)
    f = PgcModel(TINY, "factorial_pgc", s.n_c, node_circuit=s.node_circuit, edge_circuit=s.edge_circuit,
                 coupling_logits=s.coupling_logits, cardinality_logits=s.cardinality_logits)
    p = PgcModel(TINY, "pi_pgc", s.n_c, node_circuit=s.node_circuit, edge_circuit=s.edge_circuit,
                 coupling_logits=s.coupling_logits, cardinality_logits=s.cardinality_logits, ordering="bft")
    rng = np.random.default_rng(2)
    for _ in range(20):
        g = random_graph(rng, TINY)
        assert p.logp(g) <= f.logp(g) + math.lgamma(g.n + 1) + 1e-12


def test_log_cardinality():
    m = make_model(DatasetMeta(4, 2, 2))
    m.cardinality_logits = np.zeros(4)
    assert np.allclose(m.log_cardinality(), math.log(0.25))
    m.cardinality_logits = np.array([0.3, -2.0, 1.0, 0.0])
    assert logsumexp(m.log_cardinality()) == pytest.approx(0.0, abs=1e-12)


def test_m1_model_samples_single_nodes():
    m = new_model(DatasetMeta(1, 3, 2), mode="s_pgc", seed=1)
    assert all(g.n == 1 for g in m.sample(np.random.default_rng(0), 50))


def test_cardinality_sampling():
    m = make_model(DatasetMeta(4, 2, 2), mode="i_pgc")
    m.cardinality_logits = np.array([0.5, -1.0, 1.5, 0.0])
    ns, _, _ = m.sample_arrays(np.random.default_rng(0), 100_000)
    emp = np.bincount(ns, minlength=5)[1:] / 100_000
    assert 0.5 * np.abs(emp - np.exp(m.log_cardinality())).sum() < 0.01


@pytest.mark.parametrize("mode", MODES)
def test_sampling_matches_enumeration(mode):
    m = make_model(mode=mode, seed=11)
    graphs, probs = exact_distribution(m)
    assert tv(m.sample(np.random.default_rng(0), 200_000), graphs, probs) < 0.02


def test_sampling_padding_is_masked():
    ns, nodes, edges = make_model(mode="s_pgc").sample_arrays(np.random.default_rng(0), 500)
    for n, x, e in zip(ns, nodes, edges):
        assert (x[n:] == MASK).all() and (e[n * (n - 1) // 2:] == MASK).all()
        assert (x[:n] != MASK).all()


@pytest.mark.parametrize("mode", MODES)
def test_conditional_full_evidence_is_returned(mode):
    m = make_model(mode=mode)
    g = GraphInstance((1, 0, 1), (1, 0, 1))
    assert set(m.sample_conditional(g, np.random.default_rng(0), 50)) == {g}


@pytest.mark.parametrize("mode", MODES)
def test_conditional_empty_evidence_is_unconditional(mode):
    m = make_model(mode=mode, seed=12)
    graphs, probs = exact_distribution(m)
    assert tv(m.sample_conditional(None, np.random.default_rng(1), 200_000), graphs, probs) < 0.02


@pytest.mark.parametrize("mode", MODES)
def test_conditional_matches_enumeration(mode):
    m = make_model(mode=mode, seed=13)
    for ev in (GraphInstance((1,), ()), GraphInstance((0, 1), (1,))):
        graphs, probs = exact_conditional(m, ev)
        s = m.sample_conditional(ev, np.random.default_rng(3), 100_000)
        assert all(x.node_labels[:ev.n] == ev.node_labels for x in s)
        assert tv(s, graphs, probs) < 0.02


def test_pi_pgc_conditional_keeps_scaffold_order():
    meta = DatasetMeta(4, 2, 2)
    m = make_model(meta, mode="pi_pgc", n_s=2, n_i=2, n_c=2)
    ev = GraphInstance.from_edges([1, 0, 1], [[2, 0, 1], [2, 1, 1]])  # canonical order differs
    assert m.canonical(ev) != ev
    graphs, probs = exact_conditional(m, ev)
    s = m.sample_conditional(ev, np.random.default_rng(4), 100_000)
    for x in s:
        assert x.node_labels[:3] == ev.node_labels and x.edge_labels[:3] == ev.edge_labels
    assert tv(s, graphs, probs) < 0.02


def test_conditional_rejects_oversized_evidence():
    with pytest.raises(Exception):
        make_model().sample_conditional(GraphInstance((0,) * 4, (0,) * 6), np.random.default_rng(0))


@pytest.mark.parametrize("mode", MODES)
def test_gradients_match_finite_differences(mode):
    m = make_model(mode=mode, seed=14)
    rng = np.random.default_rng(0)
    gs = [random_graph(rng, TINY) for _ in range(4)]
    canon = mode == "pi_pgc"
    if canon:
        gs = [m.canonical(g) for g in gs]
    w = rng.normal(size=len(gs))
    _, grads = m.logp_and_grad(gs, weights=w, canonical=canon)
    f = (lambda: w @ m.logp_presorted_many(gs)) if canon else (lambda: w @ m.logp_many(gs))
    params = m.parameters()
    h = 1e-4
    for pi in rng.choice(len(params), size=min(6, len(params)), replace=False):
        p = params[pi]
        idx = tuple(rng.integers(0, s) for s in p.shape)
        old = p[idx]
        p[idx] = old + h
        a = f()
        p[idx] = old - h
        b = f()
        p[idx] = old
        fd = (a - b) / (2 * h)
        assert abs(fd - grads[pi][idx]) <= 1e-4 * max(abs(fd), abs(grads[pi][idx]), 1e-6)


def test_parameters_round_trip():
    m = make_model(mode="s_pgc")
    ps = [p + 1.0 for p in m.parameters()]
    m.set_parameters(ps)
    assert all(np.array_equal(a, b) for a, b in zip(ps, m.parameters()))
    with pytest.raises(ModelError):
        m.set_parameters(ps[:-1])
