"""Graph circuit model: node circuit x edge circuit coupled by an n_c-way mixture.

``log p(G) = log p(G^n | n) + log p(n)`` where ``p(G^n | n)`` is

    logsumexp_c [ log w_c + node_c(X) + edge_c(L) ]

evaluated on the padded graph with every padding variable marginalized.
Invariance modes:

* ``s_pgc``         the fixed-order likelihood as given (order sensitive),
* ``pi_pgc``        the graph is sorted into a canonical order first,
* ``factorial_pgc`` exact average over all ``n!`` orderings (small ``n`` only),
* ``i_pgc``         each component is a product of shared categorical tables
                    over nodes and edges, invariant by construction.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from . import circuit as C
from .graphdata import (MASK, DataError, DatasetMeta, GraphInstance, edge_endpoints, num_edges,
                        pad_values, permute, tri_index)
from .ordering import KINDS as ORDERINGS, node_order
from .regiongraph import RegionGraphSpec, build_region_graph, build_rt_sync

log = logging.getLogger(__name__)

MODES = ("i_pgc", "pi_pgc", "s_pgc", "factorial_pgc")
MODE_ALIASES = {"ipgc": "i_pgc", "pipgc": "pi_pgc", "spgc": "s_pgc", "nfactpgc": "factorial_pgc",
                **{m: m for m in MODES}}
CHUNK = 1 << 16

# Reference hyperparameter grid, quoted in hyperparameter errors.
HYPERPARAMETER_GRID = (
    "reference grid (QM9): n_l in {1,2,3}, n_S in {16,32,64}, n_I in {16,32}, "
    "n_R in {16,32,64} (rt/rt_s), HCLT n_S in {64,128,256,512}, n_c in {1,4,16,64,256,512}")


class ModelError(ValueError):
    pass


def normalize_mode(mode: str) -> str:
    try:
        return MODE_ALIASES[mode.lower()]
    except KeyError:
        raise ModelError(f"unknown mode {mode!r}; expected one of {', '.join(sorted(MODE_ALIASES))}") from None


@dataclass
class QuerySpec:
    """Evidence/marginal query: per-variable category or :data:`MASK` over padded slots."""

    n: int
    nodes: np.ndarray  # (m,)
    edges: np.ndarray  # (m(m-1)/2,)

    def validate(self, meta: DatasetMeta) -> None:
        if not 1 <= self.n <= meta.m:
            raise DataError(f"query node count {self.n} outside [1, {meta.m}]")
        if self.nodes.shape != (meta.m,) or self.edges.shape != (meta.n_edges,):
            raise DataError("query arrays do not match the model meta")
        if np.any(self.nodes[self.n:] != MASK) or np.any(self.edges[num_edges(self.n):] != MASK):
            raise DataError("query observes a padding variable (index >= n)")
        if np.any(self.nodes >= meta.n_x) or np.any(self.nodes < MASK):
            raise DataError("query node category out of range")
        if np.any(self.edges >= meta.n_a) or np.any(self.edges < MASK):
            raise DataError("query edge category out of range")

    @classmethod
    def observed(cls, g: GraphInstance, meta: DatasetMeta) -> "QuerySpec":
        nodes, edges = pad_values([g], meta)
        return cls(g.n, nodes[0], edges[0])

    @classmethod
    def marginal(cls, n: int, meta: DatasetMeta) -> "QuerySpec":
        return cls(n, np.full(meta.m, MASK), np.full(meta.n_edges, MASK))

    def marginalize_node(self, i: int) -> "QuerySpec":
        """Mask node ``i`` and every edge incident to it."""
        nodes, edges = self.nodes.copy(), self.edges.copy()
        nodes[i] = MASK
        for j in range(self.n):
            if j != i:
                edges[tri_index(max(i, j), min(i, j))] = MASK
        return QuerySpec(self.n, nodes, edges)

    def permuted(self, p: Sequence[int]) -> "QuerySpec":
        """Query pattern after reordering nodes (new ``i`` is old ``p[i]``)."""
        n = self.n
        nodes, edges = self.nodes.copy(), self.edges.copy()
        nodes[:n] = self.nodes[list(p)]
        for i in range(1, n):
            for j in range(i):
                a, b = p[i], p[j]
                edges[tri_index(i, j)] = self.edges[tri_index(max(a, b), min(a, b))]
        return QuerySpec(n, nodes, edges)

    @classmethod
    def from_json(cls, d: dict | str, meta: DatasetMeta) -> "QuerySpec":
        """Parse ``{"n": 3, "nodes": {"0": 1, "2": "marg"}, "edges": {"1,0": 2}}``.

        Real variables that are not listed are marginalized.  Edge keys are
        ``"i,j"`` pairs or flat indices.  ``nodes``/``edges`` may also be
        positional lists (flat edge order), where ``-1`` marginalizes.
        """
        if isinstance(d, str):
            d = json.loads(d)
        try:
            n = int(d["n"])
        except (KeyError, TypeError, ValueError):
            raise DataError("query spec needs an integer 'n'") from None
        nodes = np.full(meta.m, MASK, dtype=np.int64)
        edges = np.full(meta.n_edges, MASK, dtype=np.int64)

        def value(v):
            if isinstance(v, str) and v.lower() in ("marg", "mask", "*"):
                return MASK
            return int(v)

        def entries(field):
            raw = d.get(field, {})
            return dict(enumerate(raw)) if isinstance(raw, list) else dict(raw)

        try:
            for key, v in entries("nodes").items():
                i = int(key)
                if not 0 <= i < meta.m:
                    raise DataError(f"query node index {i} out of range")
                nodes[i] = value(v)
            for key, v in entries("edges").items():
                parts = str(key).split(",")
                if len(parts) == 2:
                    i, j = int(parts[0]), int(parts[1])
                    if i == j:
                        raise DataError(f"query edge {key} is a self loop")
                    k = tri_index(max(i, j), min(i, j))
                else:
                    k = int(parts[0])
                if not 0 <= k < meta.n_edges:
                    raise DataError(f"query edge {key} out of range")
                edges[k] = value(v)
        except (TypeError, ValueError) as err:
            if isinstance(err, DataError):
                raise
            raise DataError(f"malformed query spec ({err})") from None
        spec = cls(n, nodes, edges)
        spec.validate(meta)
        return spec


class PgcModel:
    """Node/edge circuits, coupling weights and cardinality distribution."""

    def __init__(self, meta: DatasetMeta, mode: str, n_c: int, *,
                 node_circuit: C.LayeredCircuit | None = None,
                 edge_circuit: C.LayeredCircuit | None = None,
                 ipgc_node_logits: np.ndarray | None = None,
                 ipgc_edge_logits: np.ndarray | None = None,
                 coupling_logits: np.ndarray | None = None,
                 cardinality_logits: np.ndarray | None = None,
                 ordering: str | None = None, ordering_seed: int = 0,
                 factorial_cap: int = 6, hyper: dict | None = None):
        self.meta = meta
        self.mode = normalize_mode(mode)
        self.n_c = int(n_c)
        self.node_circuit = node_circuit
        self.edge_circuit = edge_circuit
        self.ipgc_node_logits = ipgc_node_logits
        self.ipgc_edge_logits = ipgc_edge_logits
        self.coupling_logits = np.zeros(n_c) if coupling_logits is None else np.asarray(coupling_logits, float)
        self.cardinality_logits = (np.zeros(meta.m) if cardinality_logits is None
                                   else np.asarray(cardinality_logits, float))
        self.ordering = ordering
        self.ordering_seed = ordering_seed
        self.factorial_cap = factorial_cap
        self.hyper = dict(hyper or {})
        self._validate()

    def _validate(self):
        if self.n_c < 1:
            raise ModelError(f"n_c must be >= 1; {HYPERPARAMETER_GRID}")
        if self.coupling_logits.shape != (self.n_c,):
            raise ModelError("coupling logits must have length n_c")
        if self.cardinality_logits.shape != (self.meta.m,):
            raise ModelError("cardinality logits must have length m")
        if self.mode == "pi_pgc":
            if self.ordering in (None, "none", ""):
                raise ModelError("mode pi_pgc needs an ordering (random | bft | dft | rcm)")
            if self.ordering not in ORDERINGS:
                raise ModelError(f"unknown ordering {self.ordering!r}; expected one of {', '.join(ORDERINGS)}")
        if self.mode == "factorial_pgc" and self.meta.m > self.factorial_cap:
            raise ModelError(
                f"factorial_pgc enumerates n! orderings; m={self.meta.m} exceeds the cap "
                f"{self.factorial_cap}")
        if self.mode == "i_pgc":
            if self.ipgc_node_logits is None or self.ipgc_node_logits.shape != (self.n_c, self.meta.n_x):
                raise ModelError("i_pgc needs (n_c, n_x) node logits")
            if self.ipgc_edge_logits is None or self.ipgc_edge_logits.shape != (self.n_c, self.meta.n_a):
                raise ModelError("i_pgc needs (n_c, n_a) edge logits")
        else:
            for name, circ, nv in (("node", self.node_circuit, self.meta.m),
                                   ("edge", self.edge_circuit, self.meta.n_edges)):
                if nv == 0:
                    if circ is not None:
                        raise ModelError(f"{name} circuit given for zero variables")
                    continue
                if circ is None or circ.num_vars != nv:
                    raise ModelError(f"{name} circuit must cover {nv} variables")
                if circ.out_width != self.n_c:
                    raise ModelError(f"{name} circuit output width {circ.out_width} != n_c={self.n_c}")

    # ------------------------------------------------------------------ parameters

    def parameter_names(self) -> list[str]:
        if self.mode == "i_pgc":
            names = ["ipgc_node", "ipgc_edge"]
        else:
            names = [f"node/{i}" for i in range(len(self.node_circuit.parameters()))]
            if self.edge_circuit is not None:
                names += [f"edge/{i}" for i in range(len(self.edge_circuit.parameters()))]
        return names + ["coupling", "cardinality"]

    def parameters(self) -> list[np.ndarray]:
        if self.mode == "i_pgc":
            ps = [self.ipgc_node_logits, self.ipgc_edge_logits]
        else:
            ps = list(self.node_circuit.parameters())
            if self.edge_circuit is not None:
                ps += self.edge_circuit.parameters()
        return ps + [self.coupling_logits, self.cardinality_logits]

    def set_parameters(self, params: Sequence[np.ndarray]) -> None:
        params = [np.array(p, dtype=np.float64) for p in params]
        current = self.parameters()
        if len(params) != len(current) or any(p.shape != q.shape for p, q in zip(params, current)):
            raise ModelError("parameter list does not match the model")
        if self.mode == "i_pgc":
            self.ipgc_node_logits, self.ipgc_edge_logits = params[0], params[1]
        else:
            k = len(self.node_circuit.parameters())
            self.node_circuit.set_parameters(params[:k])
            if self.edge_circuit is not None:
                self.edge_circuit.set_parameters(params[k:-2])
        self.coupling_logits, self.cardinality_logits = params[-2], params[-1]

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def check(self) -> list[str]:
        problems = []
        if self.mode != "i_pgc":
            for name, circ in (("node", self.node_circuit), ("edge", self.edge_circuit)):
                if circ is not None:
                    problems += [f"{name}: {p}" for p in C.check_structure(circ, root_width=self.n_c)]
        if abs(logsumexp(self.log_coupling())) > 1e-9:
            problems.append("coupling weights not normalized")
        if abs(logsumexp(self.log_cardinality())) > 1e-9:
            problems.append("cardinality distribution not normalized")
        return problems

    # ------------------------------------------------------------------ core evaluation

    def log_cardinality(self) -> np.ndarray:
        """``log p(n)`` for ``n = 1..m`` (index ``n - 1``)."""
        return log_softmax(self.cardinality_logits)

    def log_coupling(self) -> np.ndarray:
        return log_softmax(self.coupling_logits)

    def _ipgc_counts(self, node_vals, edge_vals):
        b = node_vals.shape[0]
        cx = np.zeros((b, self.meta.n_x))
        ca = np.zeros((b, self.meta.n_a))
        rows, cols = np.nonzero(node_vals != MASK)
        np.add.at(cx, (rows, node_vals[rows, cols]), 1.0)
        rows, cols = np.nonzero(edge_vals != MASK)
        np.add.at(ca, (rows, edge_vals[rows, cols]), 1.0)
        return cx, ca

    def component_scores(self, node_vals: np.ndarray, edge_vals: np.ndarray):
        """``(batch, n_c)`` per-component joint log-scores and the evaluation caches."""
        node_vals = np.atleast_2d(np.asarray(node_vals, dtype=np.int64))
        edge_vals = np.asarray(edge_vals, dtype=np.int64).reshape(node_vals.shape[0], self.meta.n_edges)
        self._check_ranges(node_vals, edge_vals)
        if self.mode == "i_pgc":
            cx, ca = self._ipgc_counts(node_vals, edge_vals)
            comp = (cx @ log_softmax(self.ipgc_node_logits, axis=1).T
                    + ca @ log_softmax(self.ipgc_edge_logits, axis=1).T)
            return comp + self.log_coupling(), (cx, ca)
        node_cache = C.forward(self.node_circuit, node_vals)
        comp = node_cache.root + self.log_coupling()
        edge_cache = None
        if self.edge_circuit is not None:
            edge_cache = C.forward(self.edge_circuit, edge_vals)
            comp = comp + edge_cache.root
        return comp, (node_cache, edge_cache)

    def _check_ranges(self, node_vals, edge_vals):
        if np.any(node_vals >= self.meta.n_x) or np.any(node_vals < MASK):
            raise DataError(f"node category outside [0, {self.meta.n_x})")
        if np.any(edge_vals >= self.meta.n_a) or np.any(edge_vals < MASK):
            raise DataError(f"edge category outside [0, {self.meta.n_a})")

    def fixed_logp_values(self, node_vals, edge_vals) -> np.ndarray:
        comp, _ = self.component_scores(node_vals, edge_vals)
        return logsumexp(comp, axis=1)

    def logp_joint_fixed(self, g: GraphInstance) -> float:
        """``log p(G^n | n)`` for the node order as given."""
        return float(self.logp_joint_fixed_many([g])[0])

    def logp_joint_fixed_many(self, graphs: Sequence[GraphInstance]) -> np.ndarray:
        for g in graphs:
            g.validate(self.meta)
        if not graphs:
            return np.zeros(0)
        return self.fixed_logp_values(*pad_values(graphs, self.meta))

    def canonical(self, g: GraphInstance) -> GraphInstance:
        return permute(g, node_order(g, self.ordering, self.ordering_seed))

    def _expand(self, graphs: Sequence[GraphInstance]):
        """Rows to evaluate per graph: (row graphs, group id per row, log #rows per graph)."""
        rows, group, logk = [], [], []
        for gi, g in enumerate(graphs):
            g.validate(self.meta)
            if self.mode == "factorial_pgc":
                if g.n > self.factorial_cap:
                    raise ModelError(f"factorial_pgc supports n <= {self.factorial_cap}, got {g.n}")
                perms = list(itertools.permutations(range(g.n)))
                rows += [permute(g, p) for p in perms]
                group += [gi] * len(perms)
                logk.append(math.lgamma(g.n + 1))
            else:
                rows.append(self.canonical(g) if self.mode == "pi_pgc" else g)
                group.append(gi)
                logk.append(0.0)
        return rows, np.asarray(group, dtype=np.int64), np.asarray(logk)

    def logp_many(self, graphs: Sequence[GraphInstance]) -> np.ndarray:
        """``log p(G)`` per graph, dispatched on the invariance mode."""
        if not graphs:
            return np.zeros(0)
        rows, group, logk = self._expand(graphs)
        row_lp = np.concatenate([self.fixed_logp_values(*pad_values(rows[s:s + CHUNK], self.meta))
                                 for s in range(0, len(rows), CHUNK)])
        if self.mode == "factorial_pgc":
            out = _group_lse(row_lp, group, len(graphs)) - logk
        else:
            out = row_lp
        ns = np.array([g.n for g in graphs])
        return out + self.log_cardinality()[ns - 1]

    def logp(self, g: GraphInstance) -> float:
        return float(self.logp_many([g])[0])

    def logp_presorted_many(self, graphs: Sequence[GraphInstance]) -> np.ndarray:
        """pi_pgc ``log p(G)`` for graphs already in canonical order."""
        ns = np.array([g.n for g in graphs])
        return self.logp_joint_fixed_many(graphs) + self.log_cardinality()[ns - 1]

    def logp_ipgc_component(self, g: GraphInstance, z: int) -> float:
        """``log p(G^n | z, n)`` of one i_pgc component (coupling weight excluded)."""
        if self.mode != "i_pgc":
            raise ModelError("logp_ipgc_component needs mode i_pgc")
        g.validate(self.meta)
        cx, ca = self._ipgc_counts(*pad_values([g], self.meta))
        return float(cx[0] @ log_softmax(self.ipgc_node_logits, axis=1)[z]
                     + ca[0] @ log_softmax(self.ipgc_edge_logits, axis=1)[z])

    # ------------------------------------------------------------------ queries

    def query(self, q: QuerySpec) -> float:
        """Log-probability of an evidence/marginal event with ``n`` fixed, including ``log p(n)``.

        pi_pgc queries are read in the canonical frame; factorial_pgc averages
        the pattern over all node orderings.
        """
        q.validate(self.meta)
        if self.mode == "factorial_pgc":
            if q.n > self.factorial_cap:
                raise ModelError(f"factorial_pgc supports n <= {self.factorial_cap}")
            pats = [q.permuted(p) for p in itertools.permutations(range(q.n))]
            lp = self.fixed_logp_values(np.stack([p.nodes for p in pats]), np.stack([p.edges for p in pats]))
            val = logsumexp(lp) - math.lgamma(q.n + 1)
        else:
            val = self.fixed_logp_values(q.nodes[None], q.edges[None])[0]
        return float(val + self.log_cardinality()[q.n - 1])

    # ------------------------------------------------------------------ gradients

    def logp_and_grad(self, graphs: Sequence[GraphInstance], weights=None, canonical: bool = False):
        """Per-graph ``log p(G)`` and ``sum_b weights[b] * d log p(G_b) / d params``.

        With ``canonical=True`` pi_pgc inputs are taken as already sorted.
        Gradients are w.r.t. the stored logits, in :meth:`parameters` order.
        """
        if not graphs:
            raise ModelError("empty batch")
        weights = np.ones(len(graphs)) if weights is None else np.asarray(weights, float)
        if self.mode == "pi_pgc" and canonical:
            rows, group, logk = list(graphs), np.arange(len(graphs)), np.zeros(len(graphs))
            for g in rows:
                g.validate(self.meta)
        else:
            rows, group, logk = self._expand(graphs)
        node_vals, edge_vals = pad_values(rows, self.meta)
        comp, caches = self.component_scores(node_vals, edge_vals)
        row_lp = logsumexp(comp, axis=1)
        lse = _group_lse(row_lp, group, len(graphs))
        graph_lp = lse - logk
        row_share = np.exp(row_lp - lse[group])
        up = (weights[group] * row_share)[:, None] * softmax(comp, axis=1)  # d/d comp

        grads: list[np.ndarray] = []
        if self.mode == "i_pgc":
            cx, ca = caches
            grads.append(C.logit_grad(self.ipgc_node_logits, up.T @ cx))
            grads.append(C.logit_grad(self.ipgc_edge_logits, up.T @ ca))
        else:
            node_cache, edge_cache = caches
            grads += C.backward(self.node_circuit, node_cache, up, wrt="logits")
            if self.edge_circuit is not None:
                grads += C.backward(self.edge_circuit, edge_cache, up, wrt="logits")
        grads.append(C.logit_grad(self.coupling_logits, up.sum(axis=0)))
        ns = np.array([g.n for g in graphs])
        onehot = np.zeros((len(graphs), self.meta.m))
        onehot[np.arange(len(graphs)), ns - 1] = 1.0
        grads.append(C.logit_grad(self.cardinality_logits, weights @ onehot))
        return graph_lp + self.log_cardinality()[ns - 1], grads

    # ------------------------------------------------------------------ sampling

    def _sample_components(self, rng, comp_scores: np.ndarray, count: int) -> np.ndarray:
        return C._draw(rng, np.broadcast_to(comp_scores, (count, self.n_c)))

    def _sample_given(self, rng, node_ev: np.ndarray, edge_ev: np.ndarray, count: int):
        """Draw ``count`` full assignments conditioned on one evidence row."""
        comp, caches = self.component_scores(node_ev[None], edge_ev[None])
        z = self._sample_components(rng, comp[0], count)
        if self.mode == "i_pgc":
            nodes = np.where(node_ev[None] != MASK, node_ev[None],
                             _draw_rows(rng, log_softmax(self.ipgc_node_logits, axis=1)[z], self.meta.m))
            edges = np.where(edge_ev[None] != MASK, edge_ev[None],
                             _draw_rows(rng, log_softmax(self.ipgc_edge_logits, axis=1)[z], self.meta.n_edges))
            return nodes, edges.reshape(count, self.meta.n_edges)
        node_cache, edge_cache = caches
        nodes = C.sample_topdown(self.node_circuit, rng, cache=_repeat_cache(node_cache, count), root_units=z)
        if self.edge_circuit is None:
            return nodes, np.zeros((count, 0), dtype=np.int64)
        edges = C.sample_topdown(self.edge_circuit, rng, cache=_repeat_cache(edge_cache, count), root_units=z)
        return nodes, edges

    def sample_arrays(self, rng: np.random.Generator, count: int):
        """Unconditional draws as ``(n, node_vals, edge_vals)`` with padding set to :data:`MASK`."""
        ns_all, nodes_all, edges_all = [], [], []
        m, e = self.meta.m, self.meta.n_edges
        for start in range(0, count, CHUNK):
            k = min(CHUNK, count - start)
            ns = 1 + C._draw(rng, np.broadcast_to(self.log_cardinality(), (k, m)))
            nodes, edges = self._sample_given(rng, np.full(m, MASK), np.full(e, MASK), k)
            if self.mode == "factorial_pgc":
                nodes, edges = _random_relabel(rng, ns, nodes, edges)
            ns_all.append(ns)
            nodes_all.append(nodes)
            edges_all.append(edges)
        if not ns_all:
            return np.zeros(0, dtype=np.int64), np.zeros((0, m), np.int64), np.zeros((0, e), np.int64)
        return _mask_padding(np.concatenate(ns_all), np.concatenate(nodes_all), np.concatenate(edges_all))

    def sample(self, rng: np.random.Generator, count: int = 1) -> list[GraphInstance]:
        return arrays_to_graphs(*self.sample_arrays(rng, count))

    def _scaffold_frame(self, evidence: GraphInstance):
        """Evidence as placed in model slots, plus the node map back to the caller's order."""
        if self.mode == "pi_pgc":
            p = node_order(evidence, self.ordering, self.ordering_seed).mapping
            return permute(evidence, p), p
        return evidence, tuple(range(evidence.n))

    def sample_conditional_arrays(self, evidence: GraphInstance | None, rng: np.random.Generator, count: int):
        """Completions of a known ``k``-node subgraph placed in slots ``[0, k)``.

        The node count is drawn from its exact posterior ``p(n | evidence)``;
        the remaining variables are then sampled top-down from the circuit
        posterior.  The evidence is returned verbatim in the first ``k`` slots.
        ``evidence=None`` is the empty scaffold (``k = 0``).
        """
        if evidence is None:
            k, framed, back = 0, None, ()
        else:
            evidence.validate(self.meta)
            k = evidence.n
            framed, back = self._scaffold_frame(evidence)
        m = self.meta.m
        log_pn = self.log_cardinality()
        options = []  # (log weight, n, placement)
        for n in range(max(k, 1), m + 1):
            placements = (list(itertools.permutations(range(n), k)) if self.mode == "factorial_pgc"
                          else [tuple(range(k))])
            pats = [_placed_query(framed, pos, n, self.meta) for pos in placements]
            lq = self.fixed_logp_values(np.stack([p.nodes for p in pats]), np.stack([p.edges for p in pats]))
            extra = (math.lgamma(n - k + 1) - math.lgamma(n + 1)) if self.mode == "factorial_pgc" else 0.0
            for pos, val in zip(placements, lq):
                options.append((log_pn[n - 1] + extra + val, n, pos))
        weights = np.array([o[0] for o in options])
        if not np.isfinite(logsumexp(weights)):
            raise ModelError("evidence has zero probability under the model")
        picks = C._draw(rng, np.broadcast_to(weights, (count, len(weights)))) if count else np.zeros(0, int)
        ns = np.zeros(count, dtype=np.int64)
        nodes = np.full((count, m), MASK, dtype=np.int64)
        edges = np.full((count, self.meta.n_edges), MASK, dtype=np.int64)
        for oi in np.unique(picks):
            rows = np.flatnonzero(picks == oi)
            _, n, pos = options[oi]
            pat = _placed_query(framed, pos, n, self.meta)
            for s in range(0, rows.size, CHUNK):
                r = rows[s:s + CHUNK]
                nv, ev = self._sample_given(rng, pat.nodes, pat.edges, r.size)
                if self.mode == "factorial_pgc":
                    nv, ev = _unplace(rng, pos, n, nv, ev)
                ns[r], nodes[r], edges[r] = n, nv, ev
        if self.mode == "pi_pgc" and tuple(back) != tuple(range(k)):
            nodes, edges = _relabel_prefix(back, nodes, edges)
        return _mask_padding(ns, nodes, edges)

    def sample_conditional(self, evidence: GraphInstance | None, rng: np.random.Generator,
                           count: int = 1) -> list[GraphInstance]:
        return arrays_to_graphs(*self.sample_conditional_arrays(evidence, rng, count))

    # ------------------------------------------------------------------ state

    def structure_json(self) -> dict:
        return {
            "meta": self.meta.to_json(), "mode": self.mode, "n_c": self.n_c,
            "ordering": self.ordering, "ordering_seed": self.ordering_seed,
            "factorial_cap": self.factorial_cap, "hyper": self.hyper,
            "node_circuit": self.node_circuit.to_json() if self.node_circuit is not None else None,
            "edge_circuit": self.edge_circuit.to_json() if self.edge_circuit is not None else None,
        }

    @classmethod
    def from_structure(cls, d: dict) -> "PgcModel":
        meta = DatasetMeta.from_json(d["meta"])
        mode = normalize_mode(d["mode"])
        n_c = int(d["n_c"])
        kw = {}
        if mode == "i_pgc":
            kw["ipgc_node_logits"] = np.zeros((n_c, meta.n_x))
            kw["ipgc_edge_logits"] = np.zeros((n_c, meta.n_a))
        else:
            if d.get("node_circuit"):
                kw["node_circuit"] = C.LayeredCircuit.from_json(d["node_circuit"])
            if d.get("edge_circuit"):
                kw["edge_circuit"] = C.LayeredCircuit.from_json(d["edge_circuit"])
        return cls(meta, mode, n_c, ordering=d.get("ordering"), ordering_seed=d.get("ordering_seed", 0),
                   factorial_cap=d.get("factorial_cap", 6), hyper=d.get("hyper"), **kw)


# ---------------------------------------------------------------------- helpers

def _group_lse(values: np.ndarray, group: np.ndarray, count: int) -> np.ndarray:
    """Log-sum-exp of ``values`` within contiguous groups ``0..count-1``."""
    starts = np.searchsorted(group, np.arange(count))
    peak = np.maximum.reduceat(values, starts)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.add.reduceat(np.exp(values - peak[group]), starts)) + peak


def _draw_rows(rng, log_tables: np.ndarray, width: int) -> np.ndarray:
    """``(count, width)`` i.i.d. draws, row ``b`` from ``log_tables[b]``."""
    count = log_tables.shape[0]
    if width == 0:
        return np.zeros((count, 0), dtype=np.int64)
    cdf = np.cumsum(np.exp(log_tables), axis=1)
    u = rng.random((count, width)) * cdf[:, -1:]
    return np.minimum((u[:, :, None] >= cdf[:, None, :]).sum(axis=2), log_tables.shape[1] - 1)


def _repeat_cache(cache: C.ForwardCache, count: int) -> C.ForwardCache:
    return C.ForwardCache(np.repeat(cache.values, count, axis=0),
                          [np.repeat(o, count, axis=0) for o in cache.outputs])


def _mask_padding(ns, nodes, edges):
    nodes, edges = nodes.copy(), edges.copy()
    m = nodes.shape[1]
    nodes[np.arange(m)[None, :] >= ns[:, None]] = MASK
    if edges.shape[1]:
        first = edge_endpoints(m)[:, 0]
        edges[first[None, :] >= ns[:, None]] = MASK
    return ns, nodes, edges


def _edge_gather(perms: np.ndarray) -> np.ndarray:
    """Flat source edge index for each new edge under per-row node maps ``perms``."""
    n = perms.shape[1]
    if n < 2:
        return np.zeros((perms.shape[0], 0), dtype=np.int64)
    ij = edge_endpoints(n)
    a, b = perms[:, ij[:, 0]], perms[:, ij[:, 1]]
    hi, lo = np.maximum(a, b), np.minimum(a, b)
    return hi * (hi - 1) // 2 + lo


def _apply_perms(perms: np.ndarray, nodes: np.ndarray, edges: np.ndarray, n: int):
    """Rows of ``nodes``/``edges`` reordered so new node ``i`` is old ``perms[:, i]`` (first ``n`` slots)."""
    nodes, edges = nodes.copy(), edges.copy()
    r = np.arange(nodes.shape[0])[:, None]
    nodes[:, :n] = nodes[r, perms]
    ne = num_edges(n)
    if ne:
        edges[:, :ne] = edges[r, _edge_gather(perms)]
    return nodes, edges


def _random_relabel(rng, ns, nodes, edges):
    nodes, edges = nodes.copy(), edges.copy()
    for n in np.unique(ns):
        rows = np.flatnonzero(ns == n)
        perms = np.argsort(rng.random((rows.size, n)), axis=1)
        nodes[rows], edges[rows] = _apply_perms(perms, nodes[rows], edges[rows], int(n))
    return nodes, edges


def _placed_query(g: GraphInstance, pos, n: int, meta: DatasetMeta) -> QuerySpec:
    """Pattern with node ``j`` of ``g`` observed at slot ``pos[j]`` of an ``n``-node graph."""
    nodes = np.full(meta.m, MASK, dtype=np.int64)
    edges = np.full(meta.n_edges, MASK, dtype=np.int64)
    for j, p in enumerate(pos):
        nodes[p] = g.node_labels[j]
    for a in range(len(pos)):
        for b in range(a):
            pa, pb = pos[a], pos[b]
            edges[tri_index(max(pa, pb), min(pa, pb))] = g.edge(a, b)
    return QuerySpec(n, nodes, edges)


def _unplace(rng, pos, n, nodes, edges):
    """Move evidence from slots ``pos`` to ``[0, k)``; the other nodes get a uniform random order."""
    k = len(pos)
    free = [s for s in range(n) if s not in set(pos)]
    count = nodes.shape[0]
    perms = np.empty((count, n), dtype=np.int64)
    perms[:, :k] = pos
    if free:
        shuffle = np.argsort(rng.random((count, len(free))), axis=1)
        perms[:, k:] = np.asarray(free)[shuffle]
    return _apply_perms(perms, nodes, edges, n)


def _relabel_prefix(back, nodes, edges):
    """Undo the canonical reordering of the first ``k`` slots (new ``i`` is old ``inv[i]``)."""
    k = len(back)
    inv = np.empty(k, dtype=np.int64)
    inv[np.asarray(back)] = np.arange(k)
    m = nodes.shape[1]
    perms = np.broadcast_to(np.concatenate([inv, np.arange(k, m)]), (nodes.shape[0], m))
    return _apply_perms(np.ascontiguousarray(perms), nodes, edges, m)


def arrays_to_graphs(ns, nodes, edges) -> list[GraphInstance]:
    return [GraphInstance(tuple(nodes[b, :n]), tuple(edges[b, :num_edges(n)]))
            for b, n in enumerate(ns)]


def graph_key(n: int, nodes: np.ndarray, edges: np.ndarray) -> tuple:
    return (int(n),) + tuple(int(v) for v in nodes[:n]) + tuple(int(v) for v in edges[:num_edges(n)])


# ---------------------------------------------------------------------- construction

def new_model(meta: DatasetMeta, node_rg: RegionGraphSpec | None = None,
              edge_rg: RegionGraphSpec | None = None, n_s: int = 8, n_i: int = 8, n_c: int = 4,
              mode: str = "pi_pgc", ordering: str | None = "bft", seed: int = 0,
              data: Sequence[GraphInstance] | None = None, factorial_cap: int = 6,
              ordering_seed: int = 0, max_kronecker: int = C.DEFAULT_MAX_KRONECKER,
              init_scale: float = 0.01) -> PgcModel:
    """Build a freshly initialized model.

    ``data`` is only consulted by the ``hclt`` region graph (Chow-Liu
    structure); pi_pgc data is sorted into the model's ordering first.
    """
    mode = normalize_mode(mode)
    node_rg = node_rg or RegionGraphSpec("bt")
    edge_rg = edge_rg or RegionGraphSpec("bt")
    if min(n_s, n_i, n_c) < 1:
        raise ModelError(f"n_s, n_i, n_c must be >= 1 (got {n_s}, {n_i}, {n_c}); {HYPERPARAMETER_GRID}")
    if (node_rg.kind == "rt_s") != (edge_rg.kind == "rt_s"):
        raise ModelError(f"rt_s synchronizes both circuits; node={node_rg.kind} edge={edge_rg.kind}")
    if mode == "pi_pgc" and ordering in (None, "none", ""):
        raise ModelError("mode pi_pgc needs an ordering (random | bft | dft | rcm)")
    if mode == "factorial_pgc" and meta.m > factorial_cap:
        raise ModelError(f"factorial_pgc: m={meta.m} exceeds the cap {factorial_cap}")
    rng = np.random.default_rng(seed)
    hyper = {"node_rg": vars(node_rg), "edge_rg": vars(edge_rg), "n_s": n_s, "n_i": n_i, "seed": seed}
    common = dict(ordering=ordering if mode == "pi_pgc" else None, ordering_seed=ordering_seed,
                  factorial_cap=factorial_cap, hyper=hyper)
    coupling = rng.uniform(-init_scale, init_scale, n_c)
    cardinality = rng.uniform(-init_scale, init_scale, meta.m)
    if mode == "i_pgc":
        return PgcModel(meta, mode, n_c,
                        ipgc_node_logits=rng.uniform(-init_scale, init_scale, (n_c, meta.n_x)),
                        ipgc_edge_logits=rng.uniform(-init_scale, init_scale, (n_c, meta.n_a)),
                        coupling_logits=coupling, cardinality_logits=cardinality, **common)

    node_data = edge_data = None
    if data:
        graphs = data
        if mode == "pi_pgc":
            graphs = [permute(g, node_order(g, ordering, ordering_seed)) for g in data]
        node_data, edge_data = pad_values(graphs, meta)
    node_vars, edge_vars = list(range(meta.m)), list(range(meta.n_edges))
    if node_rg.kind == "rt_s":
        node_roots, edge_roots = build_rt_sync(node_vars, edge_vars, meta, node_rg.n_layers,
                                               edge_rg.n_layers, node_rg.n_repetitions, node_rg.seed)
    else:
        node_roots = build_region_graph(node_rg, node_vars, node_data, meta.n_x)
        edge_roots = build_region_graph(edge_rg, edge_vars, edge_data, meta.n_a) if edge_vars else []

    def make(roots, rg, cats, nv):
        width_in = n_s if rg.kind == "hclt" else n_i
        try:
            return C.compile_circuit(roots, cats, n_s, width_in, out_width=n_c, rng=rng,
                                     max_kronecker=max_kronecker, num_vars=nv, init_scale=init_scale)
        except C.CircuitError as err:
            raise ModelError(f"{err}; {HYPERPARAMETER_GRID}") from None

    node_c = make(node_roots, node_rg, meta.n_x, meta.m)
    edge_c = make(edge_roots, edge_rg, meta.n_a, meta.n_edges) if edge_vars else None
    return PgcModel(meta, mode, n_c, node_circuit=node_c, edge_circuit=edge_c,
                    coupling_logits=coupling, cardinality_logits=cardinality, **common)
