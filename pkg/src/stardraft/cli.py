"""``stardraft`` command line.

Every command reads a JSON config (``--config``); flags override config
values. Exit codes: 0 success, 1 config error, 2 connection error,
3 invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import signal
import sys
import tempfile
import threading
from pathlib import Path
from typing import Any, Callable

from . import analytics
from .analytics import ParamError
from .bench import BenchError, bench_table, run_bench
from .configio import ConfigError, decode_params, read_config, reference_run, require, resolve_models
from .core import ModelError
from .runtime import ClientConfig, ClientError, DraftServer, ServerConfig, run_target
from .sim import (
    RECORD_COLUMNS,
    InvariantError,
    check_record_order,
    check_work_conservation,
    config_from_dict,
    drop_warmup,
    compute_metrics,
    run_sim,
    write_records_csv,
)
from .sim import ConfigError as SimConfigError
from .table import MetricsRow, MetricsTable

EXIT_OK, EXIT_CONFIG, EXIT_CONNECTION, EXIT_INVARIANT = 0, 1, 2, 3

logger = logging.getLogger("stardraft")


class Invariant(Exception):
    pass


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)
        sys.stdout.flush()


def _json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _n_list(doc: dict[str, Any]) -> list[int]:
    raw = doc.get("N_list")
    if raw is None:
        raise ConfigError("this command needs N_list (config) or --n-list")
    if isinstance(raw, str):
        raw = [int(x) for x in raw.split(",") if x.strip()]
    values = [int(x) for x in raw]
    if not values or min(values) < 1:
        raise ConfigError("N_list must hold positive integers")
    return values


# analyze


def _timing_doc(doc: dict[str, Any]) -> dict[str, Any]:
    flat = dict(doc)
    flat.update(doc.get("timing", {}))
    return flat


def cmd_analyze(doc: dict[str, Any], base: Path | None, args: argparse.Namespace) -> int:
    flat = _timing_doc(doc)
    ns = _n_list(flat) if "N_list" in flat else [int(flat.get("N", 1))]
    preds = []
    for n in ns:
        flat["N"] = n
        if "betas" in flat and len(flat["betas"]) != n:
            raise ConfigError(f"betas has {len(flat['betas'])} entries for N={n}")
        timing, acc = analytics.params_from_dict(flat)
        preds.append(analytics.throughput(timing, acc))
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(analytics.CSV_COLUMNS)
        for p in preds:
            w.writerow([repr(v) if isinstance(v, float) else v for v in p.csv_row()])
        _emit(buf.getvalue(), args.out)
        return EXIT_OK
    docs = [p.to_dict() for p in preds]
    if "standalone_rate" in flat:
        timing, acc = analytics.params_from_dict({**flat, "N": 1, "betas": acc.betas[:1]} if "betas" in flat else {**flat, "N": 1})
        limit = analytics.n_max(timing, acc.betas[0], float(flat["standalone_rate"]))
        for d in docs:
            d["N_max"] = limit
    _emit(_json(docs[0] if len(docs) == 1 else docs), args.out)
    return EXIT_OK


# simulate / sweep


def _sim_config(doc: dict[str, Any], base: Path | None, n: int | None = None):
    sim_doc = dict(doc)
    if n is not None:
        sim_doc["N"] = n
    return config_from_dict(sim_doc, base)


def _simulate_one(config):
    records = run_sim(config)
    problems = check_work_conservation(records) + check_record_order(records)
    if problems:
        raise Invariant("; ".join(problems[:5]))
    metrics = compute_metrics(drop_warmup(records, config), d=config.d, n_targets=config.N)
    if abs(metrics.O_gamma / metrics.R_q - metrics.mean_accept_len) > 1e-9 * metrics.mean_accept_len:
        raise Invariant("O_gamma / R_q differs from the mean accept length")
    return records, metrics


def cmd_simulate(doc: dict[str, Any], base: Path | None, args: argparse.Namespace) -> int:
    config = _sim_config(doc, base)
    records, metrics = _simulate_one(config)
    if args.format == "csv":
        _emit(MetricsTable([MetricsRow.from_run(metrics)]).to_csv(), args.out)
    else:
        _emit(_json(metrics.to_dict()), args.out)
    records_out = args.records_out or doc.get("records_out")
    if records_out:
        with open(records_out, "w", newline="") as fh:
            write_records_csv(records, fh)
    return EXIT_OK


def cmd_sweep(doc: dict[str, Any], base: Path | None, args: argparse.Namespace) -> int:
    ns = _n_list(doc)
    doc.setdefault("N", ns[0])
    table = MetricsTable()
    companion = io.StringIO()
    w = csv.writer(companion, lineterminator="\n")
    w.writerow(("N",) + RECORD_COLUMNS)
    all_metrics = []
    for n in ns:
        records, metrics = _simulate_one(_sim_config(doc, base, n))
        table.add(MetricsRow.from_run(metrics))
        all_metrics.append(metrics.to_dict())
        for r in records:
            w.writerow([n, r.gamma, r.tag, repr(r.enqueue_time), repr(r.start_time), repr(r.end_time),
                        repr(r.return_time), r.accept_len, repr(r.idle_before), repr(r.wait)])
    if args.format == "json":
        _emit(_json(all_metrics), args.out)
    else:
        _emit(table.to_csv(), args.out)
    records_out = args.records_out or doc.get("records_out")
    if records_out is None and args.out:
        records_out = str(Path(args.out).with_suffix("")) + ".records.csv"
    if records_out:
        Path(records_out).write_text(companion.getvalue())
    return EXIT_OK


# runtime


def _server_config(doc: dict[str, Any], base: Path | None) -> ServerConfig:
    require(doc, "d")
    if doc.get("draft") is None and "epsilon" not in doc:
        raise ConfigError("serve-draft needs 'draft', or 'target' plus 'epsilon'")
    _, draft = resolve_models(doc, base)
    return ServerConfig(
        draft=draft,
        d=int(doc["d"]),
        k=int(doc.get("k", 1)),
        seed=int(doc.get("seed", 0)),
        host=str(doc.get("host", "127.0.0.1")),
        port=int(doc.get("port", 0)),
        mode=str(doc.get("mode", "per-port")),
        layer_time=float(doc.get("layer_time", 0.0)),
        grace=float(doc.get("grace", 30.0)),
        policy=str(doc.get("policy", "fifo")),
    )


def cmd_serve_draft(doc: dict[str, Any], base: Path | None, args: argparse.Namespace) -> int:
    try:
        config = _server_config(doc, base)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    try:
        server = DraftServer(config).start()
    except OSError as exc:
        print(f"error: cannot listen on {config.host}:{config.port}: {exc}", file=sys.stderr)
        return EXIT_CONNECTION
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    print(f"READY {server.port}", flush=True)
    while not stop.wait(0.2):
        pass
    server.stop()
    metrics = server.metrics()
    text = _json(metrics)
    if args.out:
        Path(args.out).write_text(text)
    bad = metrics["work_conservation_violations"]
    if bad:
        print(f"invariant violated: {bad[0]}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


def cmd_run_target(doc: dict[str, Any], base: Path | None, args: argparse.Namespace) -> int:
    params = decode_params(doc)
    target, draft = resolve_models(doc, base)
    if "port" not in doc:
        raise ConfigError("run-target needs the server port (config 'port' or --port)")
    config = ClientConfig(
        target=target,
        draft=draft,
        prompt=params["prompt"],
        d=params["d"],
        k=params["k"],
        max_tokens=params["max_tokens"],
        seed=params["seed"],
        host=str(doc.get("host", "127.0.0.1")),
        port=int(doc["port"]),
        greedy=params["greedy"],
        timeout=float(doc.get("timeout", 30.0)),
        verify_time=float(doc.get("verify_time", 0.0)),
        request_delay=float(doc.get("request_delay", 0.0)),
    )
    try:
        result = run_target(config)
    except (OSError, ClientError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONNECTION
    _emit(_json(result.to_dict()), args.out)
    return EXIT_OK


def cmd_bench(doc: dict[str, Any], base: Path | None, args: argparse.Namespace) -> int:
    ns = _n_list(doc)
    workdir = doc.get("workdir")
    with tempfile.TemporaryDirectory(prefix="stardraft-bench-") as tmp:
        path = Path(workdir) if workdir else Path(tmp)
        path.mkdir(parents=True, exist_ok=True)
        try:
            rows = run_bench(doc, ns, path, base, check_reference=bool(doc.get("check_reference", True)))
        except BenchError as exc:
            print(f"error: {exc}", file=sys.stderr)
            for name, log in exc.logs.items():
                if log.strip():
                    print(f"--- {name} ---\n{log.rstrip()}", file=sys.stderr)
            return EXIT_CONNECTION
    if args.format == "json":
        _emit(_json([{"metrics": r.row.__dict__, "checks": r.checks, "details": r.details} for r in rows]), args.out)
    else:
        _emit(bench_table(rows).to_csv(), args.out)
    failed = [(r.row.N, name) for r in rows for name, ok in r.checks.items() if not ok]
    for n, name in failed:
        print(f"invariant violated at N={n}: {name}", file=sys.stderr)
    return EXIT_INVARIANT if failed else EXIT_OK


def cmd_reference(doc: dict[str, Any], base: Path | None, args: argparse.Namespace) -> int:
    params = decode_params(doc)
    target, draft = resolve_models(doc, base)
    out = reference_run(target, draft, params, tag=int(doc.get("tag", 1)))
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("accept_len", "count"))
        for k, v in out["accept_histogram"].items():
            w.writerow((k, v))
        _emit(buf.getvalue(), args.out)
    else:
        _emit(_json(out), args.out)
    return EXIT_OK


COMMANDS: dict[str, tuple[Callable[..., int], str, str]] = {
    "analyze": (cmd_analyze, "json", "closed-form prediction"),
    "simulate": (cmd_simulate, "json", "one discrete-event simulation"),
    "sweep": (cmd_sweep, "csv", "simulate every N in N_list"),
    "serve-draft": (cmd_serve_draft, "json", "run a draft server until interrupted"),
    "run-target": (cmd_run_target, "json", "decode one prompt against a draft server"),
    "bench": (cmd_bench, "csv", "loopback benchmark over N_list"),
    "reference": (cmd_reference, "json", "single-process speculative and plain decoding"),
}

# flag name -> config key
OVERRIDES = {
    "seed": "seed",
    "n": "N",
    "n_list": "N_list",
    "port": "port",
    "host": "host",
    "max_tokens": "max_tokens",
    "tag": "tag",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stardraft", description="One draft server, many targets.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, default_format, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output path (default stdout)")
        p.add_argument("--format", choices=("csv", "json"), default=default_format)
        p.add_argument("--n", type=int, help="number of targets")
        p.add_argument("--n-list", help="comma-separated N values")
        p.add_argument("--host")
        p.add_argument("--port", type=int)
        p.add_argument("--max-tokens", type=int)
        p.add_argument("--tag", type=int, help="session tag whose seeds to use (reference)")
        p.add_argument("--records-out", help="per-iteration records CSV (simulate, sweep)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        doc, base = read_config(args.config)
        for flag, key in OVERRIDES.items():
            value = getattr(args, flag)
            if value is not None:
                doc[key] = value
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must fit in 64 unsigned bits")
        return handler(doc, base, args)
    except (ConfigError, SimConfigError, ParamError, ModelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (Invariant, InvariantError) as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (KeyError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
