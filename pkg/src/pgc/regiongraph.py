"""Region graphs: hierarchical scope partitions that fix circuit structure.

A region node holds a scope and (unless it is a singleton leaf) one or more
partition children; a partition's children are regions whose scopes split
the parent scope.  Builders: balanced binary (BT), linear (LT), randomized
(RT), randomized with node/edge synchronized permutations (RT-S) and the
Chow-Liu tree (HCLT).
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.cluster.hierarchy import DisjointSet

from .graphdata import MASK, DatasetMeta, edge_endpoints

log = logging.getLogger(__name__)

KINDS = ("bt", "lt", "rt", "rt_s", "hclt")


@dataclass(eq=False)
class RegionNode:
    scope: tuple[int, ...]
    children: list["RegionNode"] = field(default_factory=list)
    kind: str = "region"

    @property
    def is_leaf(self) -> bool:
        return self.kind == "region" and not self.children

    def leaves(self) -> list["RegionNode"]:
        if self.is_leaf:
            return [self]
        return [leaf for ch in self.children for leaf in ch.leaves()]

    def walk(self):
        yield self
        for ch in self.children:
            yield from ch.walk()

    def to_json(self):
        if self.is_leaf:
            return self.scope[0]
        return {"kind": self.kind, "scope": list(self.scope),
                "children": [c.to_json() for c in self.children]}


@dataclass
class RegionGraphSpec:
    kind: str = "bt"
    n_layers: int | None = None
    n_repetitions: int = 1
    seed: int = 0
    smoothing: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown region graph {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.n_repetitions < 1:
            raise ValueError("n_repetitions must be >= 1")
        if self.n_layers is not None and self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")


def _leaf(v: int) -> RegionNode:
    return RegionNode((v,))


def _partition(parts: Sequence[RegionNode]) -> RegionNode:
    scope = tuple(v for p in parts for v in p.scope)
    return RegionNode(scope, list(parts), "partition")


def _region(scope, partition: RegionNode) -> RegionNode:
    return RegionNode(tuple(scope), [partition])


def _factorized(vars_: Sequence[int]) -> RegionNode:
    if len(vars_) == 1:
        return _leaf(vars_[0])
    return _region(vars_, _partition([_leaf(v) for v in vars_]))


def _check_vars(vars_) -> tuple[int, ...]:
    vars_ = tuple(int(v) for v in vars_)
    if not vars_:
        raise ValueError("region graph needs at least one variable")
    if len(set(vars_)) != len(vars_):
        raise ValueError("duplicate variables in region graph scope")
    return vars_


def build_bt(vars_: Sequence[int], n_layers: int | None = None) -> RegionNode:
    """Balanced binary splits; the left half takes ceil(k/2) variables."""
    vars_ = _check_vars(vars_)

    def rec(vs, depth):
        if len(vs) == 1:
            return _leaf(vs[0])
        if n_layers is not None and depth >= n_layers:
            return _factorized(vs)
        half = (len(vs) + 1) // 2
        return _region(vs, _partition([rec(vs[:half], depth + 1), rec(vs[half:], depth + 1)]))

    return rec(vars_, 0)


def build_lt(vars_: Sequence[int], n_layers: int | None = None) -> RegionNode:
    """Chain splits ``{v0} | {v1, ...}``."""
    vars_ = _check_vars(vars_)

    def rec(vs, depth):
        if len(vs) == 1:
            return _leaf(vs[0])
        if n_layers is not None and depth >= n_layers:
            return _factorized(vs)
        return _region(vs, _partition([_leaf(vs[0]), rec(vs[1:], depth + 1)]))

    return rec(vars_, 0)


def build_rt(vars_: Sequence[int], n_layers: int | None = None, n_repetitions: int = 1,
             seed: int = 0) -> list[RegionNode]:
    vars_ = _check_vars(vars_)
    rng = np.random.default_rng(seed)
    return [build_bt([vars_[i] for i in rng.permutation(len(vars_))], n_layers)
            for _ in range(n_repetitions)]


def synced_edge_order(sigma: Sequence[int]) -> list[int]:
    """Edge flat indices sorted by (rank of later endpoint, rank of earlier endpoint).

    ``sigma[r]`` is the node placed at rank ``r``.
    """
    m = len(sigma)
    rank = np.empty(m, dtype=np.int64)
    rank[np.asarray(sigma)] = np.arange(m)
    ij = edge_endpoints(m)
    if len(ij) == 0:
        return []
    ri, rj = rank[ij[:, 0]], rank[ij[:, 1]]
    hi, lo = np.maximum(ri, rj), np.minimum(ri, rj)
    return [int(k) for k in np.lexsort((lo, hi))]


def build_rt_sync(node_vars: Sequence[int], edge_vars: Sequence[int], meta: DatasetMeta,
                  n_layers_node: int | None = None, n_layers_edge: int | None = None,
                  n_repetitions: int = 1, seed: int = 0):
    """Randomized trees whose node and edge permutations are tied per repetition."""
    node_vars = _check_vars(node_vars)
    if len(node_vars) != meta.m or len(edge_vars) != meta.n_edges:
        raise ValueError(
            f"rt_s expects {meta.m} node and {meta.n_edges} edge variables, "
            f"got {len(node_vars)} and {len(edge_vars)}")
    rng = np.random.default_rng(seed)
    node_roots, edge_roots = [], []
    for _ in range(n_repetitions):
        sigma = rng.permutation(meta.m)
        node_roots.append(build_bt([node_vars[s] for s in sigma], n_layers_node))
        if meta.n_edges:
            edge_roots.append(build_bt([edge_vars[k] for k in synced_edge_order(sigma)], n_layers_edge))
    return node_roots, edge_roots


def mutual_information(data: np.ndarray, a: int, b: int, smoothing: float = 0.1,
                       categories: Sequence[int] | int | None = None) -> float:
    """Empirical MI (nats) of columns ``a`` and ``b`` over rows where both are observed.

    ``data`` holds integer categories with :data:`MASK` for unobserved
    entries.  ``smoothing`` is added to every joint cell.
    """
    if a == b:
        raise ValueError("mutual information needs two distinct variables")
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    data = np.asarray(data)
    both = (data[:, a] != MASK) & (data[:, b] != MASK)
    if both.sum() < 2:
        return 0.0
    xa, xb = data[both, a], data[both, b]
    if categories is None:
        ka, kb = int(xa.max()) + 1, int(xb.max()) + 1
    elif np.isscalar(categories):
        ka = kb = int(categories)
    else:
        ka, kb = int(categories[a]), int(categories[b])
    joint = np.full((ka, kb), float(smoothing))
    np.add.at(joint, (xa, xb), 1.0)
    joint /= joint.sum()
    pa, pb = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])))


def mutual_information_matrix(data: np.ndarray, vars_: Sequence[int], smoothing: float = 0.1,
                              categories=None) -> np.ndarray:
    k = len(vars_)
    mi = np.zeros((k, k))
    for x, y in itertools.combinations(range(k), 2):
        mi[x, y] = mi[y, x] = mutual_information(data, vars_[x], vars_[y], smoothing, categories)
    return mi


def max_spanning_tree(weights: np.ndarray) -> list[tuple[int, int]]:
    """Kruskal on a dense symmetric matrix; ties broken by lexicographic ``(a, b)``."""
    k = weights.shape[0]
    pairs = list(itertools.combinations(range(k), 2))
    # rounding makes float-noise ties resolve by the lexicographic rule
    pairs.sort(key=lambda ab: (-round(float(weights[ab]), 12), ab))
    ds = DisjointSet(range(k))
    tree = []
    for a, b in pairs:
        if not ds.connected(a, b):
            ds.merge(a, b)
            tree.append((a, b))
    return tree


def build_hclt(data: np.ndarray | None, vars_: Sequence[int], smoothing: float = 0.1,
               categories=None) -> RegionNode:
    """Chow-Liu tree over ``vars_`` rooted at the lowest-index variable.

    The region for the subtree under tree node ``v`` is partitioned into the
    leaf ``{v}`` and one region per child subtree.
    """
    vars_ = _check_vars(vars_)
    if data is None or len(data) == 0:
        log.warning("hclt: no data to learn a Chow-Liu tree, falling back to a linear tree")
        return build_lt(vars_)
    if len(vars_) == 1:
        return _leaf(vars_[0])
    mi = mutual_information_matrix(data, vars_, smoothing, categories)
    tree = max_spanning_tree(mi)
    adj: dict[int, list[int]] = {x: [] for x in range(len(vars_))}
    for a, b in tree:
        adj[a].append(b)
        adj[b].append(a)
    root = min(range(len(vars_)), key=lambda x: vars_[x])

    def rec(x, parent):
        kids = sorted((y for y in adj[x] if y != parent), key=lambda y: vars_[y])
        if not kids:
            return _leaf(vars_[x])
        parts = [_leaf(vars_[x])] + [rec(y, x) for y in kids]
        return _region(tuple(v for p in parts for v in p.scope), _partition(parts))

    return rec(root, None)


def chow_liu_edges(root: RegionNode) -> list[tuple[int, int]]:
    """Recover (parent, child) tree edges from an HCLT region structure."""
    out = []

    def rec(r):
        if r.is_leaf:
            return r.scope[0]
        part = r.children[0]
        head = part.children[0].scope[0]
        for sub in part.children[1:]:
            out.append((head, rec(sub)))
        return head

    rec(root)
    return out


def check_partition_tree(root: RegionNode, vars_: Sequence[int] | None = None) -> list[str]:
    """Structural violations: non-disjoint or non-covering partitions, bad leaves."""
    problems = []
    for node in root.walk():
        if node.kind == "partition":
            seen: set[int] = set()
            for ch in node.children:
                if seen & set(ch.scope):
                    problems.append(f"partition {node.scope}: overlapping children")
                seen |= set(ch.scope)
            if seen != set(node.scope):
                problems.append(f"partition {node.scope}: children do not cover scope")
        elif node.is_leaf and len(node.scope) != 1:
            problems.append(f"leaf region {node.scope} is not a singleton")
        elif not node.is_leaf:
            for ch in node.children:
                if set(ch.scope) != set(node.scope):
                    problems.append(f"region {node.scope}: partition over different scope")
    if vars_ is not None and sorted(root.scope) != sorted(vars_):
        problems.append(f"root scope {sorted(root.scope)} != {sorted(vars_)}")
    return problems


def build_region_graph(spec: RegionGraphSpec, vars_: Sequence[int], data=None,
                       categories=None) -> list[RegionNode]:
    """Dispatch on ``spec.kind`` (``rt_s`` needs :func:`build_rt_sync`)."""
    if spec.kind == "bt":
        return [build_bt(vars_, spec.n_layers)]
    if spec.kind == "lt":
        return [build_lt(vars_, spec.n_layers)]
    if spec.kind == "rt":
        return build_rt(vars_, spec.n_layers, spec.n_repetitions, spec.seed)
    if spec.kind == "hclt":
        return [build_hclt(data, vars_, spec.smoothing, categories)]
    raise ValueError("rt_s couples node and edge trees; use build_rt_sync")


def region_depth(root: RegionNode) -> int:
    """Number of partition levels on the longest root-to-leaf path."""
    if root.is_leaf:
        return 0
    return max((region_depth(ch) for p in root.children for ch in p.children), default=0) + 1


def count_regions(roots) -> int:
    return sum(1 for r in roots for node in r.walk() if node.kind == "region")


__all__ = [
    "RegionNode", "RegionGraphSpec", "build_bt", "build_lt", "build_rt", "build_rt_sync",
    "synced_edge_order", "mutual_information", "mutual_information_matrix",
    "max_spanning_tree", "build_hclt", "chow_liu_edges", "check_partition_tree",
    "build_region_graph", "region_depth", "count_regions", "KINDS",
]
