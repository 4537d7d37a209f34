"""Minibatch NLL training with Adam, checkpoints and flat key = value configs."""
from __future__ import annotations

import configparser
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graphdata import DatasetMeta, GraphInstance
from .model import PgcModel, ModelError, normalize_mode

log = logging.getLogger(__name__)

MAGIC = b"PGC1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.82
    epsilon: float = 1e-8
    batch_size: int = 256
    epochs: int = 40
    seed: int = 0
    selection: str = "nll"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.selection != "nll":
            raise ValueError("only validation NLL selection is supported")


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def nll(model: PgcModel, batch: Sequence[GraphInstance], with_grad: bool = False,
        canonical: bool = False):
    """Mean negative log-likelihood of ``batch``; with ``with_grad`` also its gradients."""
    if not batch:
        raise ValueError("nll needs a nonempty batch")
    if not with_grad:
        if model.mode == "pi_pgc" and canonical:
            return float(-np.mean(model.logp_presorted_many(batch)))
        return float(-np.mean(model.logp_many(batch)))
    lp, grads = model.logp_and_grad(batch, weights=np.full(len(batch), -1.0 / len(batch)),
                                    canonical=canonical)
    return float(-np.mean(lp)), grads


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              cfg: TrainConfig):
    """One bias-corrected Adam update; returns new parameters and state."""
    if not state.m:
        state = AdamState(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    t = state.step + 1
    new_m = [cfg.beta1 * m + (1 - cfg.beta1) * g for m, g in zip(state.m, grads)]
    new_v = [cfg.beta2 * v + (1 - cfg.beta2) * g * g for v, g in zip(state.v, grads)]
    c1 = 1 - cfg.beta1 ** t
    c2 = 1 - cfg.beta2 ** t
    new_params = [p - cfg.alpha * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
                  for p, m, v in zip(params, new_m, new_v)]
    return new_params, AdamState(t, new_m, new_v)


def _prepare(model: PgcModel, graphs: Sequence[GraphInstance]):
    if model.mode == "pi_pgc":
        return [model.canonical(g) for g in graphs], True
    return list(graphs), False


def train(model: PgcModel, train_set: Sequence[GraphInstance], valid_set: Sequence[GraphInstance],
          cfg: TrainConfig, progress=None):
    """Adam on shuffled minibatches; keeps the parameters with the lowest validation NLL.

    Returns ``(best_model, trace)`` where ``trace`` has one row per epoch
    (epoch 0 is the initialization): ``epoch, train_nll, valid_nll, best_valid_nll``.
    """
    if not train_set:
        raise ValueError("empty training set")
    train_rows, canon = _prepare(model, train_set)
    valid_rows, _ = _prepare(model, valid_set)
    select_on = valid_rows if valid_rows else train_rows

    def evaluate(rows):
        return nll(model, rows, canonical=canon)

    state = AdamState()
    best = evaluate(select_on)
    best_params = [p.copy() for p in model.parameters()]
    trace = [{"epoch": 0, "train_nll": evaluate(train_rows),
              "valid_nll": best if valid_rows else math.nan, "best_valid_nll": best}]
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_rows))
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_rows[i] for i in order[start:start + cfg.batch_size]]
            _, grads = nll(model, batch, with_grad=True, canonical=canon)
            params, state = adam_step(model.parameters(), grads, state, cfg)
            model.set_parameters(params)
        current = evaluate(select_on)
        if current < best:
            best = current
            best_params = [p.copy() for p in model.parameters()]
        row = {"epoch": epoch, "train_nll": evaluate(train_rows),
               "valid_nll": current if valid_rows else math.nan, "best_valid_nll": best}
        trace.append(row)
        log.info("epoch %d train %.4f valid %.4f", epoch, row["train_nll"], row["valid_nll"])
        if progress is not None:
            progress(row)
    model.set_parameters(best_params)
    return model, trace


def write_trace(trace: list[dict], path: str | Path) -> None:
    lines = ["epoch,train_nll,valid_nll,best_valid_nll"]
    lines += [f"{r['epoch']},{r['train_nll']!r},{r['valid_nll']!r},{r['best_valid_nll']!r}" for r in trace]
    atomic_write_text(path, "\n".join(lines) + "\n")


# --------------------------------------------------------------------------- checkpoints

def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def model_to_bytes(model: PgcModel) -> bytes:
    params = model.parameters()
    header = model.structure_json()
    header["version"] = FORMAT_VERSION
    header["blocks"] = [{"name": n, "shape": list(p.shape)}
                        for n, p in zip(model.parameter_names(), params)]
    hb = json.dumps(header).encode()
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in params)
    return MAGIC + struct.pack("<I", len(hb)) + hb + body


def model_from_bytes(data: bytes, meta: DatasetMeta | None = None) -> PgcModel:
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[8:8 + hlen])
    except json.JSONDecodeError:
        raise CheckpointError("corrupt checkpoint header") from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    if meta is not None and DatasetMeta.from_json(header["meta"]) != meta:
        raise CheckpointError(
            f"checkpoint meta {header['meta']} does not match dataset meta {meta.to_json()}")
    model = PgcModel.from_structure(header)
    params, offset = [], 8 + hlen
    for block in header["blocks"]:
        size = int(np.prod(block["shape"])) * 8
        if offset + size > len(data):
            raise CheckpointError(f"truncated checkpoint in block {block['name']}")
        params.append(np.frombuffer(data, dtype="<f8", count=size // 8, offset=offset)
                      .reshape(block["shape"]).astype(np.float64))
        offset += size
    if offset != len(data):
        raise CheckpointError("trailing bytes after parameter blocks")
    try:
        model.set_parameters(params)
    except ModelError as err:
        raise CheckpointError(f"dimension mismatch: {err}") from None
    return model


def save_model(model: PgcModel, path: str | Path) -> None:
    atomic_write_bytes(path, model_to_bytes(model))


def load_model(path: str | Path, meta: DatasetMeta | None = None) -> PgcModel:
    return model_from_bytes(Path(path).read_bytes(), meta)


# --------------------------------------------------------------------------- config

CONFIG_KEYS = ("mode", "ordering", "rg_node", "rg_edge", "n_layers_node", "n_layers_edge", "n_s",
               "n_i", "n_r", "n_c", "alpha", "beta1", "beta2", "batch_size", "epochs", "seed",
               "dataset", "meta", "out_dir")
_EXTRA_KEYS = ("smoothing", "epsilon", "factorial_cap", "ordering_seed", "max_kronecker",
               "split_seed")


class ConfigError(ValueError):
    pass


def read_config(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        with open(path) as fh:
            parser.read_string("[pgc]\n" + fh.read())
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from None
    cfg = dict(parser["pgc"])
    unknown = set(cfg) - set(CONFIG_KEYS) - set(_EXTRA_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    base = Path(path).parent
    for key in ("dataset", "meta", "out_dir"):
        if key in cfg and not os.path.isabs(cfg[key]):
            cfg[key] = str(base / cfg[key])
    return cfg


def _opt_int(cfg, key, default=None):
    v = cfg.get(key)
    if v in (None, "", "none", "None"):
        return default
    return int(v)


def train_config_from(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(alpha=float(cfg.get("alpha", 0.05)), beta1=float(cfg.get("beta1", 0.9)),
                           beta2=float(cfg.get("beta2", 0.82)), epsilon=float(cfg.get("epsilon", 1e-8)),
                           batch_size=int(cfg.get("batch_size", 256)), epochs=int(cfg.get("epochs", 40)),
                           seed=int(cfg.get("seed", 0)))
    except ValueError as err:
        raise ConfigError(str(err)) from None


def model_from_config(cfg: dict, meta: DatasetMeta, data=None) -> PgcModel:
    from .model import new_model
    from .regiongraph import RegionGraphSpec

    seed = int(cfg.get("seed", 0))
    n_r = _opt_int(cfg, "n_r", 1)
    smoothing = float(cfg.get("smoothing", 0.1))
    try:
        node_rg = RegionGraphSpec(cfg.get("rg_node", "bt"), _opt_int(cfg, "n_layers_node"), n_r, seed, smoothing)
        edge_rg = RegionGraphSpec(cfg.get("rg_edge", "bt"), _opt_int(cfg, "n_layers_edge"), n_r, seed + 1,
                                  smoothing)
        return new_model(meta, node_rg, edge_rg, n_s=int(cfg.get("n_s", 8)), n_i=int(cfg.get("n_i", 8)),
                         n_c=int(cfg.get("n_c", 4)), mode=normalize_mode(cfg.get("mode", "pipgc")),
                         ordering=cfg.get("ordering", "bft"), seed=seed, data=data,
                         factorial_cap=int(cfg.get("factorial_cap", 6)),
                         ordering_seed=int(cfg.get("ordering_seed", 0)),
                         max_kronecker=int(cfg.get("max_kronecker", 4096)))
    except ValueError as err:
        raise ConfigError(str(err)) from None
