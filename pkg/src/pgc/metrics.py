"""Generation metrics, anomaly-detection AUC and ordering diagnostics."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .graphdata import DataError, GraphInstance, permute
from .ordering import node_order


@dataclass(frozen=True)
class ValencyTable:
    """Maximum valence per node category and bond order per edge category."""

    max_valence: tuple[int, ...] = (4, 3, 2, 1)  # C, N, O, F
    bond_order: tuple[int, ...] = (0, 1, 2, 3)

    def __post_init__(self):
        object.__setattr__(self, "max_valence", tuple(int(v) for v in self.max_valence))
        object.__setattr__(self, "bond_order", tuple(int(v) for v in self.bond_order))
        if not self.bond_order or self.bond_order[0] != 0:
            raise ValueError("bond order of edge category 0 must be 0")
        if min(self.max_valence + self.bond_order) < 0:
            raise ValueError("valences and bond orders must be nonnegative")

    @classmethod
    def from_json(cls, d: dict) -> "ValencyTable":
        return cls(tuple(d["max_valence"]), tuple(d.get("bond_order", (0, 1, 2, 3))))

    def to_json(self) -> dict:
        return {"max_valence": list(self.max_valence), "bond_order": list(self.bond_order)}


def load_valency(path: str | Path) -> ValencyTable:
    try:
        return ValencyTable.from_json(json.loads(Path(path).read_text()))
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
        raise DataError(f"{path}: bad valency table ({err})") from None


def is_connected(g: GraphInstance) -> bool:
    nbrs = g.neighbors()
    seen = {0}
    queue = deque([0])
    while queue:
        for v in nbrs[queue.popleft()]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == g.n


def is_valid(g: GraphInstance, vt: ValencyTable = ValencyTable()) -> bool:
    """Valence budget respected at every node and a single connected component."""
    if any(not 0 <= c < len(vt.max_valence) for c in g.node_labels):
        raise DataError("node category outside the valency table")
    if any(not 0 <= c < len(vt.bond_order) for c in g.edge_labels):
        raise DataError("edge category outside the valency table")
    if g.n > 1:
        orders = np.asarray(vt.bond_order)[g.adjacency()]
        if np.any(orders.sum(axis=1) > np.asarray(vt.max_valence)[list(g.node_labels)]):
            return False
    return is_connected(g)


def _traversal(g: GraphInstance, adj: np.ndarray, degree: np.ndarray, start: int) -> list[int]:
    labels = g.node_labels
    seen = [False] * g.n
    order: list[int] = []

    def rank(v):
        return labels[v], degree[v], v

    while True:
        seen[start] = True
        queue = deque([start])
        while queue:
            u = queue.popleft()
            order.append(u)
            fresh = [v for v in np.flatnonzero(adj[u]) if not seen[v]]
            for v in sorted(fresh, key=lambda v: (adj[u, v], *rank(v))):
                seen[v] = True
                queue.append(v)
        rest = [v for v in range(g.n) if not seen[v]]
        if not rest:
            return order
        start = min(rest, key=rank)


def certificate(g: GraphInstance) -> bytes:
    """Smallest BFT serialization over all start nodes.

    Neighbours are expanded by (edge label, node label, degree, index), so
    isomorphic graphs agree whenever the remaining index ties are automorphic.
    """
    if g.n == 0:
        return b"\x00"
    adj = g.adjacency()
    degree = (adj > 0).sum(axis=1)
    best = None
    for s in range(g.n):
        h = permute(g, _traversal(g, adj, degree, s))
        code = bytes([h.n, *h.node_labels, *h.edge_labels])
        if best is None or code < best:
            best = code
    return best


def _pct(num: int, den: int) -> float:
    return 100.0 * num / den if den else 0.0


def metrics_suite(samples: Sequence[GraphInstance], train: Sequence[GraphInstance],
                  vt: ValencyTable = ValencyTable()) -> dict:
    """Chained percentages: valid over all, unique over valid, novel over unique."""
    if not samples:
        raise ValueError("metrics_suite needs at least one sample")
    valid = [g for g in samples if is_valid(g, vt)]
    unique = {certificate(g) for g in valid}
    seen = {certificate(g) for g in train}
    novel = unique - seen
    return {"valid": _pct(len(valid), len(samples)), "unique": _pct(len(unique), len(valid)),
            "novel": _pct(len(novel), len(unique)), "fcd": "n/a", "nspdk": "n/a",
            "counts": {"samples": len(samples), "valid": len(valid), "unique": len(unique),
                       "novel": len(novel)}}


def auc(scores_pos, scores_neg) -> float:
    """Probability a positive outranks a negative (Mann-Whitney), ties counting one half."""
    pos = np.asarray(scores_pos, dtype=float).ravel()
    neg = np.asarray(scores_neg, dtype=float).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc needs nonempty positive and negative scores")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2
    return float(u / (pos.size * neg.size))


def anomaly_experiment(model, in_set: Sequence[GraphInstance], out_set: Sequence[GraphInstance],
                       permute_frac: float = 0.2, seed: int = 0, bins: int = 30) -> dict:
    """Score both sets by ``log p`` after permuting a fraction of the in-distribution items.

    Exactly ``floor(permute_frac * len(in_set))`` items are reordered by a
    uniform random permutation.  Returns the AUC (in-distribution as the
    positive class) plus shared-edge histograms of the two score sets.
    """
    if not 0.0 <= permute_frac <= 1.0:
        raise ValueError("permute_frac must lie in [0, 1]")
    if not in_set or not out_set:
        raise ValueError("anomaly_experiment needs nonempty in and out sets")
    rng = np.random.default_rng(seed)
    k = int(np.floor(permute_frac * len(in_set) + 1e-9))
    chosen = rng.choice(len(in_set), size=k, replace=False)
    shown = list(in_set)
    for i in chosen:
        shown[i] = permute(shown[i], rng.permutation(shown[i].n))
    s_in = model.logp_many(shown)
    s_out = model.logp_many(list(out_set))
    finite = np.concatenate([s_in, s_out])
    finite = finite[np.isfinite(finite)]
    lo, hi = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
    edges = np.linspace(lo, hi if hi > lo else lo + 1.0, bins + 1)
    return {"auc": auc(s_in, s_out), "n_permuted": k, "scores_in": s_in, "scores_out": s_out,
            "bin_edges": edges, "hist_in": np.histogram(s_in, edges)[0],
            "hist_out": np.histogram(s_out, edges)[0]}


def histogram_csv(result: dict) -> str:
    lines = ["bin_lo,bin_hi,count_in,count_out"]
    e = result["bin_edges"]
    for i in range(len(e) - 1):
        lines.append(f"{e[i]!r},{e[i + 1]!r},{int(result['hist_in'][i])},{int(result['hist_out'][i])}")
    return "\n".join(lines) + "\n"


def adjacency_heatmap(data: Sequence[GraphInstance], kind: str, m: int | None = None,
                      seed: int = 0) -> np.ndarray:
    """Mean symmetrized edge presence per node pair after reordering each graph by ``kind``.

    The random ordering draws an independent permutation per graph from one seeded stream.
    """
    if m is None:
        m = max((g.n for g in data), default=0)
    rng = np.random.default_rng(seed)
    heat = np.zeros((m, m))
    for g in data:
        if g.n > m:
            raise DataError(f"graph with {g.n} nodes exceeds heatmap size {m}")
        h = permute(g, node_order(g, kind, rng))
        a = (h.adjacency() > 0).astype(float)
        heat[:h.n, :h.n] += a
    return heat / len(data) if data else heat


def bandwidth_weighted_mean(heat: np.ndarray) -> float:
    """``sum |i-j| H_ij / sum H_ij``; zero for an all-zero matrix."""
    total = heat.sum()
    if total == 0:
        return 0.0
    i, j = np.indices(heat.shape)
    return float((np.abs(i - j) * heat).sum() / total)


def heatmap_csv(heat: np.ndarray) -> str:
    return "\n".join(",".join(repr(float(v)) for v in row) for row in heat) + "\n"
