"""Seeded synthetic graph families used by the experiments and tests."""
from __future__ import annotations

import numpy as np

from .graphdata import GraphInstance, num_edges, tri_index
from .ordering import canonicalize


def random_tree(rng: np.random.Generator, n: int, n_x: int, n_a: int) -> GraphInstance:
    """Random recursive tree; node labels follow degree, edge labels are uniform nonzero."""
    edges = [0] * num_edges(n)
    degree = [0] * n
    for i in range(1, n):
        j = int(rng.integers(0, i))
        edges[tri_index(i, j)] = int(rng.integers(1, n_a))
        degree[i] += 1
        degree[j] += 1
    nodes = tuple(min(d - 1, n_x - 1) if d else 0 for d in degree)
    return GraphInstance(nodes, tuple(edges))


def tree_family(rng: np.random.Generator, count: int, sizes, n_x: int = 3, n_a: int = 2,
                ordering: str | None = "bft") -> list[GraphInstance]:
    """``count`` trees with sizes drawn uniformly from ``sizes``, optionally canonicalized."""
    sizes = list(sizes)
    out = []
    for _ in range(count):
        g = random_tree(rng, int(rng.choice(sizes)), n_x, n_a)
        out.append(canonicalize(g, ordering) if ordering else g)
    return out


def chain_graph(rng: np.random.Generator, n: int, n_x: int = 1, n_a: int = 2) -> GraphInstance:
    """A path visiting the nodes in a random order, stored in that random order."""
    walk = rng.permutation(n)
    edges = [0] * num_edges(n)
    for a, b in zip(walk[:-1], walk[1:]):
        edges[tri_index(max(a, b), min(a, b))] = int(rng.integers(1, n_a))
    return GraphInstance(tuple(int(v) for v in rng.integers(0, n_x, n)), tuple(edges))


def chain_corpus(rng: np.random.Generator, count: int, sizes, n_x: int = 1, n_a: int = 2):
    sizes = list(sizes)
    return [chain_graph(rng, int(rng.choice(sizes)), n_x, n_a) for _ in range(count)]
