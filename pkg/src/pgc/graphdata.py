"""Attributed graph containers, lower-triangular edge layout, padding and dataset I/O.

Edge variables of an ``n``-node graph are stored in row-flattened
lower-triangular order: ``(1,0), (2,0), (2,1), (3,0), ...``.  Edge category
0 always means "no edge".
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MASK = -1


class DataError(ValueError):
    """Raised for malformed or out-of-range graph data."""


def tri_index(i: int, j: int) -> int:
    """Flat index of the undirected edge ``(i, j)`` with ``i > j``."""
    if not i > j >= 0:
        raise ValueError(f"tri_index needs i > j >= 0, got ({i}, {j})")
    return i * (i - 1) // 2 + j


def tri_pair(k: int) -> tuple[int, int]:
    """Inverse of :func:`tri_index`."""
    if k < 0:
        raise ValueError(f"negative edge index {k}")
    i = int((1 + math.isqrt(1 + 8 * k)) // 2)
    while i * (i - 1) // 2 > k:
        i -= 1
    while (i + 1) * i // 2 <= k:
        i += 1
    return i, k - i * (i - 1) // 2


def num_edges(n: int) -> int:
    return n * (n - 1) // 2


def edge_endpoints(m: int) -> np.ndarray:
    """``(m(m-1)/2, 2)`` array of ``(i, j)`` pairs in flat order."""
    pairs = [(i, j) for i in range(1, m) for j in range(i)]
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


@dataclass(frozen=True)
class DatasetMeta:
    m: int
    n_x: int
    n_a: int
    atom_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.m < 1 or self.n_x < 1 or self.n_a < 2:
            raise DataError(
                f"invalid meta m={self.m} n_x={self.n_x} n_a={self.n_a} "
                "(need m >= 1, n_x >= 1, n_a >= 2)")
        if self.atom_names is not None:
            object.__setattr__(self, "atom_names", tuple(self.atom_names))

    @property
    def n_edges(self) -> int:
        return num_edges(self.m)

    def to_json(self) -> dict:
        out = {"m": self.m, "n_x": self.n_x, "n_a": self.n_a}
        if self.atom_names is not None:
            out["atom_names"] = list(self.atom_names)
        return out

    @classmethod
    def from_json(cls, d: dict) -> "DatasetMeta":
        try:
            return cls(int(d["m"]), int(d["n_x"]), int(d["n_a"]), d.get("atom_names"))
        except KeyError as err:
            raise DataError(f"meta is missing key {err}") from None


@dataclass(frozen=True)
class GraphInstance:
    """An ``n``-node graph with node categories and lower-triangular edge categories."""

    node_labels: tuple[int, ...]
    edge_labels: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "node_labels", tuple(int(c) for c in self.node_labels))
        object.__setattr__(self, "edge_labels", tuple(int(c) for c in self.edge_labels))
        if len(self.node_labels) < 1:
            raise DataError("a graph needs at least one node")
        if len(self.edge_labels) != num_edges(self.n):
            raise DataError(
                f"{self.n}-node graph needs {num_edges(self.n)} edge labels, "
                f"got {len(self.edge_labels)}")

    @property
    def n(self) -> int:
        return len(self.node_labels)

    def edge(self, i: int, j: int) -> int:
        if i == j:
            raise ValueError("no self loops")
        return self.edge_labels[tri_index(max(i, j), min(i, j))]

    def adjacency(self) -> np.ndarray:
        """Symmetric ``n x n`` matrix of edge categories (0 on the diagonal)."""
        a = np.zeros((self.n, self.n), dtype=np.int64)
        if self.n > 1:
            ij = edge_endpoints(self.n)
            a[ij[:, 0], ij[:, 1]] = self.edge_labels
            a[ij[:, 1], ij[:, 0]] = self.edge_labels
        return a

    def neighbors(self) -> list[list[int]]:
        adj = self.adjacency()
        return [list(np.flatnonzero(adj[i])) for i in range(self.n)]

    def validate(self, meta: DatasetMeta) -> None:
        if self.n > meta.m:
            raise DataError(f"graph has {self.n} nodes, meta allows at most {meta.m}")
        for c in self.node_labels:
            if not 0 <= c < meta.n_x:
                raise DataError(f"node label {c} outside [0, {meta.n_x})")
        for c in self.edge_labels:
            if not 0 <= c < meta.n_a:
                raise DataError(f"edge label {c} outside [0, {meta.n_a})")

    @classmethod
    def from_edges(cls, nodes: Sequence[int], edges: Iterable[Sequence[int]] = ()) -> "GraphInstance":
        """Build from a sparse ``[(i, j, c), ...]`` edge list (either endpoint order)."""
        n = len(nodes)
        labels = [0] * num_edges(n)
        for e in edges:
            if len(e) != 3:
                raise DataError(f"edge entry must be [i, j, c], got {list(e)}")
            i, j, c = (int(v) for v in e)
            if i == j or not (0 <= i < n and 0 <= j < n):
                raise DataError(f"bad edge endpoints ({i}, {j}) for {n} nodes")
            labels[tri_index(max(i, j), min(i, j))] = c
        return cls(tuple(nodes), tuple(labels))

    def sparse_edges(self) -> list[list[int]]:
        out = []
        for k, c in enumerate(self.edge_labels):
            if c:
                i, j = tri_pair(k)
                out.append([i, j, c])
        return out

    def to_record(self) -> dict:
        return {"nodes": list(self.node_labels), "edges": self.sparse_edges()}


@dataclass(frozen=True)
class Permutation:
    """``mapping[new_position] = old_position``."""

    mapping: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "mapping", tuple(int(v) for v in self.mapping))
        if sorted(self.mapping) != list(range(len(self.mapping))):
            raise ValueError(f"not a permutation: {self.mapping}")

    def __len__(self) -> int:
        return len(self.mapping)

    def inverse(self) -> "Permutation":
        inv = [0] * len(self.mapping)
        for new, old in enumerate(self.mapping):
            inv[old] = new
        return Permutation(tuple(inv))

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(tuple(range(n)))


def permute(g: GraphInstance, p: Permutation | Sequence[int]) -> GraphInstance:
    """Reorder nodes so that new node ``i`` is old node ``p[i]``."""
    mapping = p.mapping if isinstance(p, Permutation) else Permutation(tuple(p)).mapping
    if len(mapping) != g.n:
        raise ValueError(f"permutation of size {len(mapping)} applied to {g.n}-node graph")
    nodes = tuple(g.node_labels[mapping[i]] for i in range(g.n))
    edges = tuple(
        g.edge_labels[tri_index(max(mapping[i], mapping[j]), min(mapping[i], mapping[j]))]
        for i in range(1, g.n) for j in range(i))
    return GraphInstance(nodes, edges)


@dataclass(frozen=True, eq=False)
class PaddedGraph:
    node_onehot: np.ndarray
    edge_onehot: np.ndarray
    node_mask: np.ndarray
    edge_mask: np.ndarray
    n: int = field(default=0)

    def node_values(self) -> np.ndarray:
        """Per-node category, :data:`MASK` where marginalized."""
        return np.where(self.node_mask, MASK, self.node_onehot.argmax(axis=1))

    def edge_values(self) -> np.ndarray:
        if self.edge_onehot.shape[0] == 0:
            return np.zeros(0, dtype=np.int64)
        return np.where(self.edge_mask, MASK, self.edge_onehot.argmax(axis=1))

    def to_graph(self) -> GraphInstance:
        nodes = self.node_values()[: self.n]
        edges = self.edge_values()[: num_edges(self.n)]
        return GraphInstance(tuple(nodes), tuple(edges))


def pad(g: GraphInstance, meta: DatasetMeta) -> PaddedGraph:
    g.validate(meta)
    node_vals, edge_vals = pad_values([g], meta)
    node_mask = node_vals[0] == MASK
    edge_mask = edge_vals[0] == MASK
    node_onehot = np.zeros((meta.m, meta.n_x), dtype=np.int8)
    node_onehot[np.flatnonzero(~node_mask), node_vals[0][~node_mask]] = 1
    edge_onehot = np.zeros((meta.n_edges, meta.n_a), dtype=np.int8)
    edge_onehot[np.flatnonzero(~edge_mask), edge_vals[0][~edge_mask]] = 1
    for arr in (node_onehot, edge_onehot, node_mask, edge_mask):
        arr.setflags(write=False)
    return PaddedGraph(node_onehot, edge_onehot, node_mask, edge_mask, g.n)


def pad_values(graphs: Sequence[GraphInstance], meta: DatasetMeta) -> tuple[np.ndarray, np.ndarray]:
    """Batch padding to integer category arrays with :data:`MASK` for padding.

    Real edges occupy the first ``n(n-1)/2`` flat slots, so every edge that
    touches a padded node lies past that prefix.
    """
    nodes = np.full((len(graphs), meta.m), MASK, dtype=np.int64)
    edges = np.full((len(graphs), meta.n_edges), MASK, dtype=np.int64)
    for b, g in enumerate(graphs):
        if g.n > meta.m:
            raise DataError(f"graph has {g.n} nodes, meta allows at most {meta.m}")
        nodes[b, : g.n] = g.node_labels
        edges[b, : len(g.edge_labels)] = g.edge_labels
    return nodes, edges


def load_meta(path: str | Path) -> DatasetMeta:
    with open(path) as fh:
        try:
            return DatasetMeta.from_json(json.load(fh))
        except json.JSONDecodeError as err:
            raise DataError(f"{path}: malformed meta JSON ({err})") from None


def save_meta(meta: DatasetMeta, path: str | Path) -> None:
    Path(path).write_text(json.dumps(meta.to_json()) + "\n")


def parse_record(rec: dict) -> GraphInstance:
    if not isinstance(rec, dict) or "nodes" not in rec:
        raise DataError("record must be an object with a 'nodes' list")
    edges = rec.get("edges", [])
    for e in edges:
        if len(e) == 3 and int(e[0]) <= int(e[1]):
            raise DataError(f"edge {list(e)} must satisfy i > j")
        if len(e) == 3 and int(e[2]) < 1:
            raise DataError(f"edge {list(e)} has category < 1 (no-edge is implicit)")
    return GraphInstance.from_edges(rec["nodes"], edges)


def load_dataset(path: str | Path, meta: DatasetMeta) -> list[GraphInstance]:
    graphs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                g = parse_record(json.loads(line))
                g.validate(meta)
            except (json.JSONDecodeError, DataError, TypeError, ValueError) as err:
                raise DataError(f"{path}:{lineno}: {err}") from None
            graphs.append(g)
    return graphs


def dump_dataset(graphs: Iterable[GraphInstance], fh) -> None:
    for g in graphs:
        fh.write(json.dumps(g.to_record()) + "\n")


def save_dataset(graphs: Iterable[GraphInstance], path: str | Path) -> None:
    with open(path, "w") as fh:
        dump_dataset(graphs, fh)


def split_dataset(data: Sequence, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded random partition into (train, valid, test).

    Sizes are ``floor(ratio * len)`` for the last two parts; train takes the rest.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative fractions summing to 1, got {ratios}")
    n = len(data)
    order = np.random.default_rng(seed).permutation(n)
    n_valid = int(math.floor(ratios[1] * n + 1e-9))
    n_test = int(math.floor(ratios[2] * n + 1e-9))
    n_train = n - n_valid - n_test
    pick = lambda idx: [data[i] for i in idx]
    return (pick(order[:n_train]), pick(order[n_train:n_train + n_valid]),
            pick(order[n_train + n_valid:]))
