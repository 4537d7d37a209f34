"""Node orderings for sort-conditioned models: BFT, DFT, RCM and random.

All traversals start at the lowest-index node among those of minimum
degree and restart at the lowest-index unvisited node when a component is
exhausted.  Tie-breaks look only at structure, never at labels.
"""
from __future__ import annotations

from collections import deque

import numpy as np

from .graphdata import GraphInstance, Permutation, permute

KINDS = ("random", "bft", "dft", "rcm")


def _start_node(degree: list[int]) -> int:
    return min(range(len(degree)), key=lambda v: (degree[v], v))


def _components(g: GraphInstance, visit):
    nbrs = g.neighbors()
    degree = [len(nb) for nb in nbrs]
    seen = [False] * g.n
    order: list[int] = []
    start = _start_node(degree)
    while True:
        visit(start, nbrs, degree, seen, order)
        rest = [v for v in range(g.n) if not seen[v]]
        if not rest:
            return order
        start = rest[0]


def _bfs(start, nbrs, degree, seen, order):
    seen[start] = True
    queue = deque([start])
    while queue:
        u = queue.popleft()
        order.append(u)
        for v in nbrs[u]:
            if not seen[v]:
                seen[v] = True
                queue.append(v)


def _dfs(start, nbrs, degree, seen, order):
    stack = [start]
    while stack:
        u = stack.pop()
        if seen[u]:
            continue
        seen[u] = True
        order.append(u)
        # reversed push so the smallest neighbour is expanded first
        stack.extend(v for v in reversed(nbrs[u]) if not seen[v])


def _cuthill_mckee(start, nbrs, degree, seen, order):
    seen[start] = True
    queue = deque([start])
    while queue:
        u = queue.popleft()
        order.append(u)
        for v in sorted((v for v in nbrs[u] if not seen[v]), key=lambda v: (degree[v], v)):
            seen[v] = True
            queue.append(v)


def order_bft(g: GraphInstance) -> Permutation:
    return Permutation(tuple(_components(g, _bfs)))


def order_dft(g: GraphInstance) -> Permutation:
    return Permutation(tuple(_components(g, _dfs)))


def order_rcm(g: GraphInstance) -> Permutation:
    return Permutation(tuple(reversed(_components(g, _cuthill_mckee))))


def order_random(g: GraphInstance, seed=None) -> Permutation:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Permutation(tuple(rng.permutation(g.n)))


def node_order(g: GraphInstance, kind: str, seed=None) -> Permutation:
    if kind == "bft":
        return order_bft(g)
    if kind == "dft":
        return order_dft(g)
    if kind == "rcm":
        return order_rcm(g)
    if kind == "random":
        return order_random(g, seed)
    if kind == "mca":
        raise ValueError("ordering 'mca' needs a chemistry toolkit canonicalizer and is not supported")
    raise ValueError(f"unknown ordering {kind!r}; expected one of {', '.join(KINDS)}")


def canonicalize(g: GraphInstance, kind: str, seed=None) -> GraphInstance:
    return permute(g, node_order(g, kind, seed))


def bandwidth(g: GraphInstance) -> int:
    """Largest ``|i - j|`` over present edges (0 for edgeless graphs)."""
    best = 0
    for i in range(1, g.n):
        for j in range(i):
            if g.edge(i, j):
                best = max(best, i - j)
    return best
