"""Command line: ``secure-mle {estimate,bench,audit,node,ingest-check}``.

Exit codes: 0 ok, 1 no convergence, 2 usage or input error, 3 protocol abort.
The log level comes from ``SECURE_MLE_LOG`` (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import threading
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .audit import audit_transcript
from .config import RunConfig, parse_endpoint
from .errors import ProtocolAborted, SecureMLEError, TransportTimeout
from .ingest import ingest, ingest_node, read_table
from .models import make_model
from .mvn import ParameterSet
from .nodes import DataNode
from .optimize import fit
from .oracle import pool
from .partition import PartitionLayout
from .protocol.messages import Transcript
from .runtime import Federation, default_noise_scale
from .transport import TransportConfig, serve_node

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3

log = logging.getLogger("secure_mle")


def _setup_logging() -> None:
    level = os.environ.get("SECURE_MLE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load(cfg_path: str) -> tuple[RunConfig, PartitionLayout]:
    cfg = RunConfig.load(cfg_path)
    cfg.check_files(need_data=False)
    return cfg, PartitionLayout.load(cfg.layout)


def _local_data(cfg: RunConfig, layout: PartitionLayout):
    """Partitions of the nodes this process hosts; every node for the in-process transport."""
    if cfg.transport == "in_process" or set(cfg.data) == set(layout.names):
        return ingest(cfg.data, layout, cfg.id_column, cfg.impute).partitions
    return {name: ingest_node(read_table(path, cfg.id_column), layout, name, cfg.impute)[0]
            for name, path in cfg.data.items()}


def _noise(cfg: RunConfig, zero: bool) -> float:
    if zero:
        return 0.0
    return default_noise_scale() if cfg.noise_scale is None else cfg.noise_scale


def fit_table(result, names) -> str:
    lines = [f"{'parameter':<24} {'estimate':>14} {'se':>12}"]
    se = result.se if result.se is not None else [None] * len(result.natural)
    for nm, est, s in zip(names, result.natural, se):
        lines.append(f"{nm:<24} {est:>14.6f} {'-' if s is None else f'{s:12.6f}':>12}")
    lines.append("")
    lines.append(f"log-likelihood {result.ll:.6f}")
    lines.append(f"evaluations {result.evals} (+{result.hessian_evals} for standard errors)")
    lines.append(f"converged {'yes' if result.converged else 'no'}"
                 + ("; boundary solution, standard errors withheld" if result.boundary else ""))
    return "\n".join(lines) + "\n"


def cmd_estimate(args) -> int:
    cfg, layout = _load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.check_files()
    partitions = _local_data(cfg, layout)
    model = make_model(cfg.model, layout.p, layout.var_names)
    transcript = Transcript() if cfg.output.transcript else None
    with Federation.build(layout, partitions, _noise(cfg, args.zero_noise), cfg.seed,
                          transport=cfg.transport_config()) as fed:

        class Evaluator:
            def evaluate(self, params):
                return fed.evaluate(params, transcript=transcript)

        result = fit(model, Evaluator(), cfg.optimizer)
    out = result.to_dict()
    out["model"] = cfg.model
    out["variables"] = list(layout.var_names)
    text = _dump(out)
    table = fit_table(result, result.natural_names)
    if cfg.output.result:
        cfg.output.result.write_text(text)
    if cfg.output.table:
        cfg.output.table.write_text(table)
    if transcript is not None:
        transcript.save(cfg.output.transcript)
    sys.stdout.write(table if cfg.output.result else text)
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a comma-separated list of integers") from None


def cmd_bench(args) -> int:
    cells = bench_mod.grid(args.n, args.p, args.K)

    def progress(row):
        log.info("n=%d p=%d K=%d: %.4f s/eval, error %.2e", row.n, row.p, row.K, row.seconds_per_eval, row.ll_error)

    rows = bench_mod.run_bench(cells, args.reps, args.seed, args.cap, args.transport, progress)
    if args.out:
        bench_mod.write_csv(rows, args.out)
    print(f"{'n':>6} {'p':>4} {'K':>4} {'s/eval':>10} {'ll error':>10}")
    for r in rows:
        print(f"{r.n:>6} {r.p:>4} {r.K:>4} {r.seconds_per_eval:>10.5f} {r.ll_error:>10.2e}")
    for (p, K), slope in bench_mod.n_slopes(rows).items():
        print(f"time vs n, p={p} K={K}: log-log slope {slope:.2f}")
    bad = [r for r in rows if not r.ll_error < 0.01]
    return EXIT_OK if not bad else EXIT_NOT_CONVERGED


def _params_from_file(path, p: int) -> ParameterSet:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SecureMLEError(f"cannot read parameters from {path}: {exc}") from exc
    if "mean" not in raw or "cov" not in raw:
        raise SecureMLEError(f"{path} needs 'mean' and 'cov'")
    params = ParameterSet(np.asarray(raw["mean"], float), np.asarray(raw["cov"], float))
    if params.p != p:
        raise SecureMLEError(f"{path} has {params.p} variables, layout has {p}")
    return params


def cmd_audit(args) -> int:
    cfg, layout = _load(args.config)
    cfg.check_files()
    data = ingest(cfg.data, layout, cfg.id_column, cfg.impute)
    pooled = pool(data.partitions, layout)
    if args.params:
        params = _params_from_file(args.params, layout.p)
    else:
        model = make_model(cfg.model, layout.p, layout.var_names)
        params = model.realize(model.default_start())
    noise = _noise(cfg, args.zero_noise)
    if args.transcript:
        transcript = Transcript.load(args.transcript)
    else:
        transcript = Transcript()
        with Federation.build(layout, data.partitions, noise, cfg.seed, transport=cfg.transport_config()) as fed:
            fed.evaluate(params, transcript=transcript)
    report = audit_transcript(transcript, pooled, params, layout, noise)
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n")
    print(report.table())
    return EXIT_OK if report.ok else EXIT_NOT_CONVERGED


def cmd_node(args) -> int:
    cfg, layout = _load(args.config)
    if args.name not in cfg.data:
        raise SecureMLEError(f"config has no data file for {args.name}")
    cfg.check_files()
    part, counts = ingest_node(read_table(cfg.data[args.name], cfg.id_column), layout, args.name, cfg.impute)
    endpoints = dict(cfg.endpoints)
    if args.listen:
        endpoints[args.name] = parse_endpoint(args.listen)
    if args.name not in endpoints:
        raise SecureMLEError(f"no endpoint for {args.name}")
    node = DataNode(args.name, layout, part, _noise(cfg, args.zero_noise), cfg.seed)
    tcfg = TransportConfig(kind="tcp", endpoints=endpoints, timeout_ms=cfg.timeout_ms)
    stop = threading.Event()
    try:
        serve_node(node, endpoints, tcfg, stop)
    except KeyboardInterrupt:
        stop.set()
    return EXIT_OK


def cmd_ingest_check(args) -> int:
    cfg, layout = _load(args.config)
    cfg.check_files()
    result = ingest(cfg.data, layout, cfg.id_column, cfg.impute)
    print(f"layout: {layout.kind}, {layout.n} rows, {layout.p} variables")
    print(result.summary())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="secure-mle", description="Secure distributed maximum likelihood")
    sub = ap.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="fit a model through the secure protocol")
    est.add_argument("config")
    est.add_argument("--seed", type=int)
    est.add_argument("--zero-noise", action="store_true", help="debug only: run without masking noise")
    est.set_defaults(func=cmd_estimate)

    b = sub.add_parser("bench", help="time single evaluations over an (n, p, K) grid")
    b.add_argument("--n", type=_int_list, default=[100, 500, 1000])
    b.add_argument("--p", type=_int_list, default=[10])
    b.add_argument("--K", type=_int_list, default=[2, 5])
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--cap", type=int, default=bench_mod.DEFAULT_CELL_CAP, help="refuse cells with n*p*K above this")
    b.add_argument("--transport", choices=["in_process", "tcp"], default="in_process")
    b.add_argument("--out", help="CSV output path")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("audit", help="leakage audit of one recorded evaluation")
    a.add_argument("config")
    a.add_argument("--params", help="JSON with mean and cov (an estimate result works)")
    a.add_argument("--transcript", help="audit this JSONL transcript instead of running a fresh evaluation")
    a.add_argument("--json", help="write the report as JSON")
    a.add_argument("--zero-noise", action="store_true")
    a.set_defaults(func=cmd_audit)

    nd = sub.add_parser("node", help="run a data node daemon")
    nd.add_argument("config")
    nd.add_argument("--name", required=True)
    nd.add_argument("--listen", help="host:port, overrides the config endpoint")
    nd.add_argument("--zero-noise", action="store_true")
    nd.set_defaults(func=cmd_node)

    ic = sub.add_parser("ingest-check", help="validate and align the data files of a config")
    ic.add_argument("config")
    ic.set_defaults(func=cmd_ingest_check)
    return ap


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ProtocolAborted, TransportTimeout) as exc:
        print(f"error: protocol aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (SecureMLEError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
