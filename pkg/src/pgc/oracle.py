"""Exponential-time reference computations for tiny configurations."""
from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import logsumexp

from .graphdata import MASK, DatasetMeta, GraphInstance, num_edges, permute
from .model import PgcModel, QuerySpec
from .ordering import node_order

DEFAULT_CAP = 10**6


class OracleCapExceeded(RuntimeError):
    pass


def graph_count(meta: DatasetMeta) -> int:
    return sum(meta.n_x**n * meta.n_a**num_edges(n) for n in range(1, meta.m + 1))


def enumerate_graphs(meta: DatasetMeta, cap: int = DEFAULT_CAP):
    """Every labeled graph with ``1 <= n <= m`` exactly once."""
    total = graph_count(meta)
    if total > cap:
        raise OracleCapExceeded(f"{total} graphs exceed the enumeration cap {cap}")
    for n in range(1, meta.m + 1):
        for nodes in itertools.product(range(meta.n_x), repeat=n):
            for edges in itertools.product(range(meta.n_a), repeat=num_edges(n)):
                yield GraphInstance(nodes, edges)


def _reference_logp(model: PgcModel, graphs: list[GraphInstance]) -> np.ndarray:
    """pi_pgc reads queries in the canonical frame, so its reference is the fixed-order value."""
    if model.mode == "pi_pgc":
        return model.logp_presorted_many(graphs)
    return model.logp_many(graphs)


def total_mass(model: PgcModel, cap: int = DEFAULT_CAP, bound_corrected: bool = True) -> float:
    """Sum of ``p(G)`` over every labeled graph.

    For pi_pgc each term uses the sorted likelihood; with
    ``bound_corrected`` the dropped ordering constant ``log p(pi_c | n) =
    -log n!`` is restored, which makes the sum a lower bound on the mass of
    the matching permutation-averaged model (so it must not exceed 1).
    """
    graphs = list(enumerate_graphs(model.meta, cap))
    lp = model.logp_many(graphs)
    if model.mode == "pi_pgc" and bound_corrected:
        lp = lp - np.array([math.lgamma(g.n + 1) for g in graphs])
    return float(np.exp(logsumexp(lp)))


def oracle_query(model: PgcModel, q: QuerySpec, cap: int = DEFAULT_CAP) -> float:
    """Log-probability of ``q`` by explicit summation over the marginalized real variables."""
    q.validate(model.meta)
    n, meta = q.n, model.meta
    node_free = [i for i in range(n) if q.nodes[i] == MASK]
    edge_free = [k for k in range(num_edges(n)) if q.edges[k] == MASK]
    total = meta.n_x ** len(node_free) * meta.n_a ** len(edge_free)
    if total > cap:
        raise OracleCapExceeded(f"{total} completions exceed the cap {cap}")
    graphs = []
    nodes, edges = list(q.nodes[:n]), list(q.edges[:num_edges(n)])
    for xs in itertools.product(range(meta.n_x), repeat=len(node_free)):
        for i, c in zip(node_free, xs):
            nodes[i] = c
        for es in itertools.product(range(meta.n_a), repeat=len(edge_free)):
            for k, c in zip(edge_free, es):
                edges[k] = c
            graphs.append(GraphInstance(tuple(nodes), tuple(edges)))
    return float(logsumexp(_reference_logp(model, graphs)))


def oracle_perm_average(model: PgcModel, g: GraphInstance) -> float:
    """``log (1/n!) sum_pi p(pi G | n)`` with the fixed-order likelihood."""
    if g.n > 6:
        raise OracleCapExceeded("permutation average limited to n <= 6")
    perms = [permute(g, p) for p in itertools.permutations(range(g.n))]
    return float(logsumexp(model.logp_joint_fixed_many(perms)) - math.lgamma(g.n + 1))


def exact_distribution(model: PgcModel, cap: int = DEFAULT_CAP) -> tuple[list[GraphInstance], np.ndarray]:
    """All graphs and their sampling probabilities (the fixed-order model for pi_pgc)."""
    graphs = list(enumerate_graphs(model.meta, cap))
    lp = _reference_logp(model, graphs)
    return graphs, np.exp(lp - logsumexp(lp))


def exact_conditional(model: PgcModel, evidence: GraphInstance | None, cap: int = DEFAULT_CAP):
    """Completions of a scaffold in slots ``[0, k)`` and their exact posterior probabilities.

    For pi_pgc the scaffold is conditioned in its canonical frame and each
    completion's prefix is then mapped back to the caller's node order.
    """
    if evidence is None:
        return exact_distribution(model, cap)
    k = evidence.n
    framed, back = evidence, list(range(k))
    if model.mode == "pi_pgc":
        back = list(node_order(evidence, model.ordering, model.ordering_seed).mapping)
        framed = permute(evidence, back)
    keep = [g for g in enumerate_graphs(model.meta, cap)
            if g.n >= k and g.node_labels[:k] == framed.node_labels
            and g.edge_labels[:num_edges(k)] == framed.edge_labels]
    lp = _reference_logp(model, keep)
    inv = np.argsort(back)
    shown = [permute(g, list(inv) + list(range(k, g.n))) for g in keep]
    return shown, np.exp(lp - logsumexp(lp))
