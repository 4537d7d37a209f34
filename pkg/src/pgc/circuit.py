"""Tensorized smooth and decomposable probabilistic circuits over categorical variables.

Layers live in a flat list in topological order and refer to their inputs
by index.  Every layer maps a batch of assignments to a ``(batch, width)``
array of log-values.  Parameters are unconstrained logits; sum weights and
input tables are their row-wise log-softmax, so any gradient step keeps
every mixture and categorical normalized.

Evaluation takes integer category arrays where :data:`MASK` marks a
marginalized variable; a masked categorical input integrates to one and
emits ``log 1 = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax

from .graphdata import MASK
from .regiongraph import RegionNode

DEFAULT_MAX_KRONECKER = 4096


class CircuitError(ValueError):
    pass


@dataclass(eq=False)
class InputLayer:
    variable: int
    logits: np.ndarray  # (units, categories)

    @property
    def width(self) -> int:
        return self.logits.shape[0]

    @property
    def num_categories(self) -> int:
        return self.logits.shape[1]

    def log_table(self) -> np.ndarray:
        return log_softmax(self.logits, axis=1)


@dataclass(eq=False)
class SumLayer:
    children: list[int]
    logits: np.ndarray  # (units, total child width)

    @property
    def width(self) -> int:
        return self.logits.shape[0]

    def log_weights(self) -> np.ndarray:
        return log_softmax(self.logits, axis=1)


@dataclass(eq=False)
class ProductLayer:
    children: list[int]
    kind: str  # "hadamard" | "kronecker"
    width: int = 0


Layer = InputLayer | SumLayer | ProductLayer


@dataclass
class ForwardCache:
    values: np.ndarray
    outputs: list[np.ndarray]

    @property
    def root(self) -> np.ndarray:
        return self.outputs[-1]


@dataclass(eq=False)
class LayeredCircuit:
    """Layers in topological order; the last one is the root sum layer."""

    layers: list[Layer]
    num_vars: int
    scopes: list[frozenset] = field(init=False, repr=False)

    def __post_init__(self):
        scopes: list[frozenset] = []
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, InputLayer):
                if not 0 <= layer.variable < self.num_vars:
                    raise CircuitError(f"layer {idx}: variable {layer.variable} out of range")
                scopes.append(frozenset([layer.variable]))
                continue
            if not layer.children or any(not 0 <= c < idx for c in layer.children):
                raise CircuitError(f"layer {idx}: children must precede it in topological order")
            if isinstance(layer, ProductLayer):
                widths = [self.layers[c].width for c in layer.children]
                if layer.kind == "hadamard":
                    layer.width = widths[0]
                elif layer.kind == "kronecker":
                    layer.width = int(np.prod(widths))
                else:
                    raise CircuitError(f"layer {idx}: unknown product kind {layer.kind!r}")
            scopes.append(frozenset().union(*(scopes[c] for c in layer.children)))
        self.scopes = scopes

    @property
    def root(self) -> Layer:
        return self.layers[-1]

    @property
    def out_width(self) -> int:
        return self.root.width

    @property
    def scope(self) -> frozenset:
        return self.scopes[-1]

    def param_layers(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if not isinstance(l, ProductLayer)]

    def parameters(self) -> list[np.ndarray]:
        return [self.layers[i].logits for i in self.param_layers()]

    def set_parameters(self, params: Sequence[np.ndarray]) -> None:
        idx = self.param_layers()
        if len(idx) != len(params):
            raise CircuitError("parameter list does not match circuit")
        for i, p in zip(idx, params):
            if p.shape != self.layers[i].logits.shape:
                raise CircuitError(f"layer {i}: parameter shape {p.shape} != {self.layers[i].logits.shape}")
            self.layers[i].logits = np.array(p, dtype=np.float64)

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def edge_count(self) -> int:
        """Connections between computational units."""
        total = 0
        for layer in self.layers:
            if isinstance(layer, SumLayer):
                total += layer.logits.size
            elif isinstance(layer, ProductLayer):
                total += layer.width * len(layer.children)
        return total

    def to_json(self) -> dict:
        """Structure description (parameters are stored separately)."""
        out = []
        for layer in self.layers:
            if isinstance(layer, InputLayer):
                out.append({"type": "input", "variable": layer.variable, "shape": list(layer.logits.shape)})
            elif isinstance(layer, SumLayer):
                out.append({"type": "sum", "children": layer.children, "shape": list(layer.logits.shape)})
            else:
                out.append({"type": "product", "children": layer.children, "kind": layer.kind})
        return {"num_vars": self.num_vars, "layers": out}

    @classmethod
    def from_json(cls, d: dict) -> "LayeredCircuit":
        layers: list[Layer] = []
        for rec in d["layers"]:
            if rec["type"] == "input":
                layers.append(InputLayer(int(rec["variable"]), np.zeros(rec["shape"])))
            elif rec["type"] == "sum":
                layers.append(SumLayer(list(rec["children"]), np.zeros(rec["shape"])))
            elif rec["type"] == "product":
                layers.append(ProductLayer(list(rec["children"]), rec["kind"]))
            else:
                raise CircuitError(f"unknown layer type {rec['type']!r}")
        return cls(layers, int(d["num_vars"]))


# --------------------------------------------------------------------------- compile

def compile_circuit(roots: Sequence[RegionNode], categories: Sequence[int] | int, n_sum: int,
                    n_input: int, out_width: int = 1, rng: np.random.Generator | None = None,
                    max_kronecker: int = DEFAULT_MAX_KRONECKER, num_vars: int | None = None,
                    init_scale: float = 0.01) -> LayeredCircuit:
    """Compile region-graph roots into a layered circuit.

    Leaf regions become input layers of ``n_input`` units, partitions become
    Hadamard products when all children have equal width and Kronecker
    products otherwise, inner regions become sum layers of ``n_sum`` units.
    Several roots are mixed by one final sum of width ``out_width``.
    """
    if not roots:
        raise CircuitError("no region graph roots")
    if min(n_sum, n_input, out_width) < 1:
        raise CircuitError("layer widths must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    scope = set(roots[0].scope)
    for r in roots:
        if set(r.scope) != scope:
            raise CircuitError("all roots must share the same scope")
    if num_vars is None:
        num_vars = max(scope) + 1
    cats = [int(categories)] * num_vars if np.isscalar(categories) else [int(c) for c in categories]
    if len(cats) < num_vars:
        raise CircuitError(f"category table covers {len(cats)} of {num_vars} variables")
    layers: list[Layer] = []

    def init(shape):
        return rng.uniform(-init_scale, init_scale, size=shape)

    def add(layer) -> int:
        layers.append(layer)
        return len(layers) - 1

    def width(idx):
        layer = layers[idx]
        if isinstance(layer, ProductLayer):
            ws = [width(c) for c in layer.children]
            return ws[0] if layer.kind == "hadamard" else int(np.prod(ws))
        return layer.width

    def region(node: RegionNode, w: int) -> int:
        if node.is_leaf:
            if len(node.scope) != 1:
                raise CircuitError(f"leaf region {node.scope} is not a singleton")
            v = node.scope[0]
            if not 0 <= v < num_vars:
                raise CircuitError(f"variable {v} outside [0, {num_vars})")
            return add(InputLayer(v, init((n_input, cats[v]))))
        prods = [partition(p, set(node.scope)) for p in node.children]
        total = sum(width(p) for p in prods)
        return add(SumLayer(prods, init((w, total))))

    def partition(part: RegionNode, parent_scope: set) -> int:
        seen: set = set()
        for ch in part.children:
            if seen & set(ch.scope):
                raise CircuitError(f"scope overlap in partition {part.scope}")
            seen |= set(ch.scope)
        if seen != parent_scope:
            raise CircuitError(f"partition {part.scope} does not cover its region")
        kids = [region(ch, n_sum) for ch in part.children]
        ws = [width(k) for k in kids]
        if len(set(ws)) == 1:
            return add(ProductLayer(kids, "hadamard"))
        kron = int(np.prod(ws))
        if kron > max_kronecker:
            raise CircuitError(
                f"Kronecker product of widths {ws} = {kron} exceeds cap {max_kronecker}")
        return add(ProductLayer(kids, "kronecker"))

    if len(roots) == 1:
        top = region(roots[0], out_width)
        if isinstance(layers[top], InputLayer):
            add(SumLayer([top], init((out_width, layers[top].width))))
    else:
        tops = [region(r, out_width) for r in roots]
        add(SumLayer(tops, init((out_width, sum(width(t) for t in tops)))))
    return LayeredCircuit(layers, num_vars)


# --------------------------------------------------------------------------- forward

def _kron_sum(parts: list[np.ndarray]) -> np.ndarray:
    out = parts[0]
    for p in parts[1:]:
        out = (out[:, :, None] + p[:, None, :]).reshape(out.shape[0], -1)
    return out


def _safe_lse(scores: np.ndarray, axis: int) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        return logsumexp(scores, axis=axis)


def _check_values(c: LayeredCircuit, values) -> np.ndarray:
    values = np.asarray(values, dtype=np.int64)
    if values.ndim == 1:
        values = values[None, :]
    if values.shape[1] != c.num_vars:
        raise CircuitError(f"expected {c.num_vars} values per row, got {values.shape[1]}")
    return values


def forward(c: LayeredCircuit, values) -> ForwardCache:
    """Evaluate every layer on a ``(batch, num_vars)`` category array."""
    values = _check_values(c, values)
    batch = values.shape[0]
    outs: list[np.ndarray] = []
    for layer in c.layers:
        if isinstance(layer, InputLayer):
            x = values[:, layer.variable]
            if np.any(x >= layer.num_categories) or np.any(x < MASK):
                raise CircuitError(
                    f"variable {layer.variable}: category outside [0, {layer.num_categories})")
            table = layer.log_table()
            out = np.zeros((batch, layer.width))
            obs = x != MASK
            out[obs] = table[:, x[obs]].T
        elif isinstance(layer, SumLayer):
            inp = np.concatenate([outs[ch] for ch in layer.children], axis=1)
            out = _safe_lse(layer.log_weights()[None, :, :] + inp[:, None, :], axis=2)
        elif layer.kind == "hadamard":
            out = sum(outs[ch] for ch in layer.children)
        else:
            out = _kron_sum([outs[ch] for ch in layer.children])
        outs.append(out)
    return ForwardCache(values, outs)


def forward_logp(c: LayeredCircuit, values) -> tuple[np.ndarray, ForwardCache]:
    """Root log-values (``(batch,)`` for width-1 roots) and the evaluation cache."""
    cache = forward(c, values)
    root = cache.root
    return (root[:, 0] if root.shape[1] == 1 else root), cache


# --------------------------------------------------------------------------- backward

def backward(c: LayeredCircuit, cache: ForwardCache, upstream: np.ndarray | None = None,
             wrt: str = "log_params") -> list[np.ndarray]:
    """Reverse-mode gradients of ``sum_b upstream[b] . root[b]``.

    ``wrt="log_params"`` differentiates w.r.t. the normalized log-weights and
    log-tables; ``wrt="logits"`` chains through the log-softmax to the stored
    unconstrained parameters.  Returned in :meth:`LayeredCircuit.parameters` order.
    """
    outs = cache.outputs
    if len(outs) != len(c.layers) or any(
            o.shape[1] != l.width for o, l in zip(outs, c.layers)):
        raise CircuitError("stale cache: it does not match this circuit")
    batch = cache.values.shape[0]
    if upstream is None:
        if c.out_width != 1:
            raise CircuitError("upstream gradient required for roots wider than 1")
        upstream = np.ones((batch, 1))
    upstream = np.asarray(upstream, dtype=np.float64).reshape(batch, c.out_width)
    grads_out: list[np.ndarray | None] = [None] * len(c.layers)
    grads_out[-1] = upstream
    param_grads: dict[int, np.ndarray] = {}

    def accumulate(idx, g):
        grads_out[idx] = g if grads_out[idx] is None else grads_out[idx] + g

    for idx in range(len(c.layers) - 1, -1, -1):
        layer, g = c.layers[idx], grads_out[idx]
        if g is None:
            g = np.zeros((batch, layer.width))
        if isinstance(layer, InputLayer):
            x = cache.values[:, layer.variable]
            gt = np.zeros_like(layer.logits)
            obs = x != MASK
            np.add.at(gt.T, x[obs], g[obs])
            param_grads[idx] = gt
        elif isinstance(layer, SumLayer):
            inp = np.concatenate([outs[ch] for ch in layer.children], axis=1)
            out = outs[idx]
            with np.errstate(invalid="ignore", over="ignore"):
                post = np.exp(layer.log_weights()[None] + inp[:, None, :] - out[:, :, None])
            post = np.where(np.isfinite(out)[:, :, None], post, 0.0)
            post = np.nan_to_num(post, nan=0.0)
            weighted = g[:, :, None] * post  # (B, S, in)
            param_grads[idx] = weighted.sum(axis=0)
            gin = weighted.sum(axis=1)
            start = 0
            for ch in layer.children:
                w = c.layers[ch].width
                accumulate(ch, gin[:, start:start + w])
                start += w
        elif layer.kind == "hadamard":
            for ch in layer.children:
                accumulate(ch, g)
        else:
            ws = [c.layers[ch].width for ch in layer.children]
            gk = g.reshape(batch, *ws)
            for pos, ch in enumerate(layer.children):
                axes = tuple(a + 1 for a in range(len(ws)) if a != pos)
                accumulate(ch, gk.sum(axis=axes) if axes else gk)
    grads = [param_grads[i] for i in c.param_layers()]
    if wrt == "logits":
        grads = [logit_grad(c.layers[i].logits, gr) for i, gr in zip(c.param_layers(), grads)]
    elif wrt != "log_params":
        raise ValueError(f"unknown wrt {wrt!r}")
    return grads


def logit_grad(logits: np.ndarray, grad_log_probs: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. row-wise ``log_softmax(logits)`` back to ``logits``."""
    return grad_log_probs - softmax(logits, axis=-1) * grad_log_probs.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------- sampling

def _draw(rng: np.random.Generator, log_p: np.ndarray) -> np.ndarray:
    """One categorical draw per row of unnormalized log-probabilities."""
    p = softmax(log_p, axis=1)
    cdf = np.cumsum(p, axis=1)
    u = rng.random(p.shape[0]) * cdf[:, -1]
    return np.minimum((u[:, None] >= cdf).sum(axis=1), p.shape[1] - 1)


def sample_topdown(c: LayeredCircuit, rng: np.random.Generator, num_samples: int | None = None,
                   cache: ForwardCache | None = None, root_units=None) -> np.ndarray:
    """Ancestral sampling from the root down.

    Without ``cache`` the draw follows the prior weights, i.e. the circuit's
    joint.  With a cache computed on evidence (observed entries) and masked
    targets, each sum unit picks an input in proportion to weight times the
    input's cached value, which samples the posterior given the evidence;
    observed variables are copied through.  ``root_units`` selects the root
    unit per sample (default unit 0).
    """
    if cache is not None:
        if len(cache.outputs) != len(c.layers):
            raise CircuitError("stale cache: it does not match this circuit")
        num = cache.values.shape[0]
    elif num_samples is None:
        raise CircuitError("need num_samples or a cache")
    else:
        num = int(num_samples)
    out = np.full((num, c.num_vars), MASK, dtype=np.int64)
    active: list[np.ndarray | None] = [None] * len(c.layers)
    active[-1] = (np.zeros(num, dtype=np.int64) if root_units is None
                  else np.asarray(root_units, dtype=np.int64).reshape(num))

    def assign(idx, units, rows):
        if active[idx] is None:
            active[idx] = np.full(num, -1, dtype=np.int64)
        active[idx][rows] = units

    for idx in range(len(c.layers) - 1, -1, -1):
        units = active[idx]
        if units is None:
            continue
        rows = np.flatnonzero(units >= 0)
        if rows.size == 0:
            continue
        u = units[rows]
        layer = c.layers[idx]
        if isinstance(layer, InputLayer):
            drawn = _draw(rng, layer.log_table()[u])
            if cache is not None:
                ev = cache.values[rows, layer.variable]
                drawn = np.where(ev != MASK, ev, drawn)
            out[rows, layer.variable] = drawn
        elif isinstance(layer, SumLayer):
            scores = layer.log_weights()[u]
            if cache is not None:
                inp = np.concatenate([cache.outputs[ch][rows] for ch in layer.children], axis=1)
                scores = scores + inp
            k = _draw(rng, scores)
            start = 0
            for ch in layer.children:
                w = c.layers[ch].width
                hit = (k >= start) & (k < start + w)
                assign(ch, k[hit] - start, rows[hit])
                start += w
        elif layer.kind == "hadamard":
            for ch in layer.children:
                assign(ch, u, rows)
        else:
            ws = [c.layers[ch].width for ch in layer.children]
            multi = np.unravel_index(u, ws)
            for ch, sub in zip(layer.children, multi):
                assign(ch, sub, rows)
    return out


# --------------------------------------------------------------------------- structure

def check_structure(c: LayeredCircuit, root_width: int | None = 1, tol: float = 1e-9) -> list[str]:
    """Violations of smoothness, decomposability, root width and normalization."""
    problems = []
    for idx, layer in enumerate(c.layers):
        if isinstance(layer, InputLayer):
            rows = logsumexp(layer.log_table(), axis=1)
            if np.any(np.abs(rows) > tol):
                problems.append(f"layer {idx} (input): rows not normalized")
        elif isinstance(layer, SumLayer):
            scopes = {c.scopes[ch] for ch in layer.children}
            if len(scopes) > 1:
                problems.append(f"layer {idx} (sum): smoothness violated, inputs over different scopes")
            rows = logsumexp(layer.log_weights(), axis=1)
            if np.any(np.abs(rows) > tol):
                problems.append(f"layer {idx} (sum): weights not normalized")
        else:
            seen: set = set()
            for ch in layer.children:
                if seen & c.scopes[ch]:
                    problems.append(f"layer {idx} (product): decomposability violated, overlapping scopes")
                    break
                seen |= c.scopes[ch]
            if layer.kind == "hadamard" and len({c.layers[ch].width for ch in layer.children}) > 1:
                problems.append(f"layer {idx} (product): hadamard over unequal widths")
    if not isinstance(c.root, SumLayer):
        problems.append("root is not a sum layer")
    if root_width is not None and c.out_width != root_width:
        problems.append(f"root width {c.out_width} != {root_width}")
    return problems
