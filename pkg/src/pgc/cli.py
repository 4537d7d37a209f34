"""Command-line entry point: ``pgc train|sample|eval|query|anomaly|check|heatmap``.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric failure.  Every output file is written to a temporary name and
renamed into place, so a failed command never leaves a partial file.
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import metrics as M
from .graphdata import MASK, DataError, DatasetMeta, dump_dataset, load_dataset, load_meta, parse_record, split_dataset
from .model import ModelError, QuerySpec
from .oracle import OracleCapExceeded, oracle_query, total_mass
from .training import (CheckpointError, ConfigError, atomic_write_text, load_model, model_from_config, read_config,
                       save_model, train, train_config_from, write_trace)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("pgc")


class NumericFailure(RuntimeError):
    pass


class UsageError(ValueError):
    pass


def _emit(text: str, out: str | None) -> None:
    if out:
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text)


def _load_graphs(path: str, meta: DatasetMeta | None):
    if meta is not None:
        return load_dataset(path, meta)
    graphs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    graphs.append(parse_record(json.loads(line)))
                except (json.JSONDecodeError, DataError, TypeError, ValueError) as err:
                    raise DataError(f"{path}:{lineno}: {err}") from None
    return graphs


def _require(cfg: dict, key: str) -> str:
    if not cfg.get(key):
        raise UsageError(f"config key '{key}' is required")
    return cfg[key]


def cmd_train(args) -> int:
    cfg = read_config(args.config)
    meta = load_meta(_require(cfg, "meta"))
    data = load_dataset(_require(cfg, "dataset"), meta)
    if not data:
        raise DataError(f"{cfg['dataset']}: empty dataset")
    seed = int(cfg.get("seed", 0))
    tr, va, _ = split_dataset(data, (0.8, 0.1, 0.1), seed=int(cfg.get("split_seed", seed)))
    tcfg = train_config_from(cfg)
    model = model_from_config(cfg, meta, data=tr)
    model, trace = train(model, tr, va, tcfg)
    if not all(math.isfinite(r["train_nll"]) for r in trace):
        raise NumericFailure("training produced a non-finite NLL")
    out_dir = Path(args.out or cfg.get("out_dir") or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(model, out_dir / "model.pgc")
    write_trace(trace, out_dir / "trace.csv")
    print(json.dumps({"model": str(out_dir / "model.pgc"), "trace": str(out_dir / "trace.csv"),
                      "best_valid_nll": trace[-1]["best_valid_nll"]}))
    return EXIT_OK


def cmd_sample(args) -> int:
    model = load_model(args.model)
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    rng = np.random.default_rng(args.seed)
    if args.scaffold:
        scaffold = _load_graphs(args.scaffold, model.meta)
        if len(scaffold) != 1:
            raise DataError(f"{args.scaffold}: expected exactly one scaffold record")
        graphs = model.sample_conditional(scaffold[0], rng, args.count)
    else:
        graphs = model.sample(rng, args.count)
    buf = io.StringIO()
    dump_dataset(graphs, buf)
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    meta = load_meta(args.meta) if args.meta else None
    samples = _load_graphs(args.samples, meta)
    if not samples:
        raise DataError(f"{args.samples}: no samples to evaluate")
    train_set = _load_graphs(args.train, meta) if args.train else []
    vt = M.load_valency(args.valency) if args.valency else M.ValencyTable()
    report = M.metrics_suite(samples, train_set, vt)
    _emit(json.dumps(report) + "\n", args.out)
    return EXIT_OK


def _read_spec(spec: str, meta: DatasetMeta) -> QuerySpec:
    text = Path(spec).read_text() if Path(spec).is_file() else spec
    try:
        return QuerySpec.from_json(json.loads(text), meta)
    except json.JSONDecodeError as err:
        raise DataError(f"query spec is not valid JSON ({err})") from None


def cmd_query(args) -> int:
    model = load_model(args.model)
    q = _read_spec(args.spec, model.meta)
    lp = model.query(q)
    if math.isnan(lp):
        raise NumericFailure("query evaluated to NaN")
    _emit(json.dumps({"logp": lp}) + "\n", args.out)
    return EXIT_OK


def cmd_anomaly(args) -> int:
    model = load_model(args.model)
    if not 0.0 <= args.frac <= 1.0:
        raise UsageError("--frac must lie in [0, 1]")
    in_set = _load_graphs(args.in_path, model.meta)
    out_set = _load_graphs(args.ood, model.meta)
    if not in_set or not out_set:
        raise DataError("anomaly needs nonempty --in and --ood datasets")
    res = M.anomaly_experiment(model, in_set, out_set, args.frac, args.seed)
    if args.out:
        atomic_write_text(args.out, M.histogram_csv(res))
    print(json.dumps({"auc": res["auc"], "n_permuted": res["n_permuted"]}))
    return EXIT_OK


def _random_specs(model, rng, count: int):
    meta = model.meta
    for _ in range(count):
        n = int(rng.integers(1, meta.m + 1))
        nodes = np.full(meta.m, MASK)
        edges = np.full(meta.n_edges, MASK)
        nodes[:n] = np.where(rng.random(n) < 0.5, MASK, rng.integers(0, meta.n_x, n))
        e = n * (n - 1) // 2
        edges[:e] = np.where(rng.random(e) < 0.5, MASK, rng.integers(0, meta.n_a, e))
        yield QuerySpec(n, nodes, edges)


def cmd_check(args) -> int:
    if args.model:
        model = load_model(args.model)
    elif args.config:
        cfg = read_config(args.config)
        meta = load_meta(_require(cfg, "meta"))
        data = load_dataset(cfg["dataset"], meta) if cfg.get("dataset") else None
        model = model_from_config(cfg, meta, data=data)
    else:
        raise UsageError("check needs --config or --model")
    mass = total_mass(model)
    rng = np.random.default_rng(args.seed)
    errs = [abs(model.query(q) - oracle_query(model, q)) for q in _random_specs(model, rng, args.count)]
    bound = model.mode == "pi_pgc"
    mass_ok = mass <= 1 + 1e-6 if bound else abs(mass - 1) <= 1e-6
    report = {"mode": model.mode, "total_mass": mass,
              "total_mass_expectation": "<= 1 (ordering constant restored)" if bound else "1",
              "total_mass_ok": bool(mass_ok), "queries": len(errs),
              "query_max_abs_err": max(errs, default=0.0), "structure": model.check()}
    report["ok"] = bool(mass_ok and report["query_max_abs_err"] <= 1e-6 and not report["structure"])
    _emit(json.dumps(report) + "\n", args.out)
    return EXIT_OK if report["ok"] else EXIT_NUMERIC


def cmd_heatmap(args) -> int:
    meta = load_meta(args.meta) if args.meta else None
    data = _load_graphs(args.train, meta)
    heat = M.adjacency_heatmap(data, args.ordering, meta.m if meta else None, seed=args.seed)
    _emit(M.heatmap_csv(heat), args.out)
    log.info("bandwidth-weighted mean %.6f", M.bandwidth_weighted_mean(heat))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pgc", description="Probabilistic graph circuits")
    p.add_argument("-v", "--verbose", action="store_true")
    # also accepted after the subcommand; SUPPRESS keeps it from resetting the top-level flag
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="fit a model from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="output directory (overrides out_dir)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", parents=[common], help="draw graphs as JSON lines")
    s.add_argument("--model", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scaffold", help="JSON-lines file holding one known subgraph")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", parents=[common], help="validity / uniqueness / novelty report")
    s.add_argument("--samples", required=True)
    s.add_argument("--train")
    s.add_argument("--valency", help="JSON {max_valence: [...], bond_order: [...]}")
    s.add_argument("--meta")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("query", parents=[common], help="exact log-probability of a marginal query")
    s.add_argument("--model", required=True)
    s.add_argument("--spec", required=True, help="JSON file or inline JSON")
    s.add_argument("--out")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("anomaly", parents=[common], help="AUC of in- vs out-of-distribution log-likelihoods")
    s.add_argument("--model", required=True)
    s.add_argument("--in", dest="in_path", required=True)
    s.add_argument("--ood", required=True)
    s.add_argument("--frac", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="histogram CSV")
    s.set_defaults(func=cmd_anomaly)

    s = sub.add_parser("check", parents=[common], help="brute-force oracle report for tiny models")
    s.add_argument("--config")
    s.add_argument("--model")
    s.add_argument("--count", type=int, default=20, help="random queries to compare")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_check)

    s = sub.add_parser("heatmap", parents=[common], help="mean adjacency after reordering, as CSV")
    s.add_argument("--train", required=True, help="dataset JSON lines")
    s.add_argument("--meta")
    s.add_argument("--ordering", default="bft")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ModelError) as err:
        print(f"pgc {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OracleCapExceeded, FileNotFoundError, IsADirectoryError) as err:
        print(f"pgc {args.command}: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, FloatingPointError) as err:
        print(f"pgc {args.command}: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:  # remaining argument-value problems, e.g. an unsupported ordering
        print(f"pgc {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
