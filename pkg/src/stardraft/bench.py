"""Loopback benchmark: one draft server process and N target processes per row."""

from __future__ import annotations

import json
import logging
import math
import signal
import subprocess
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .configio import decode_params, reference_run, resolve_models
from .table import MetricsRow, MetricsTable

logger = logging.getLogger(__name__)


class BenchError(RuntimeError):
    def __init__(self, message: str, logs: Mapping[str, str] | None = None) -> None:
        super().__init__(message)
        self.logs = dict(logs or {})


@dataclass
class BenchRow:
    row: MetricsRow
    checks: dict[str, bool]
    details: dict[str, Any] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())


def aggregate(n: int, d: int, server: Mapping[str, Any], clients: Sequence[Mapping[str, Any]]) -> tuple[MetricsRow, dict[str, Any]]:
    """Fold one server dump and its clients' dumps into a table row.

    The window runs from the first request any client sent to the last
    verification any client finished (same-host monotonic clock).
    """
    rounds = [r for c in clients for r in c["rounds"]]
    start = min(r["sent"] for r in rounds)
    end = max(r["verified"] for r in rounds)
    window = end - start
    logs = server["logs"]
    accepted = [sum(c["accept_lengths"]) for c in clients]
    client_rounds = [len(c["rounds"]) for c in clients]
    service = math.fsum(r["end"] - r["start"] for r in logs)
    row = MetricsRow.from_seconds(
        N=n,
        O_gamma=sum(accepted) / window,
        O_per_target=sum(a / window for a in accepted) / n,
        t_s=service / len(logs) / d,
        T_wait=math.fsum(r["wait"] for r in logs) / len(logs),
        T_idle=math.fsum(r["idle_before"] for r in logs) / (len(logs) / n),
        R_q=len(logs) / window,
        R_p=sum(c / window for c in client_rounds) / n,
        load_fraction=min(1.0, service / window),
    )
    details = {
        "window": window,
        "server_rounds": len(logs),
        "client_rounds": client_rounds,
        "accepted_tokens": accepted,
        "mean_accept_len": sum(accepted) / sum(client_rounds),
        "tags": [c["tag"] for c in clients],
    }
    return row, details


def _checks(row: MetricsRow, details: Mapping[str, Any], server: Mapping[str, Any]) -> dict[str, bool]:
    out = {
        "round_counts_match": details["server_rounds"] == sum(details["client_rounds"]),
        "throughput_identity": math.isclose(row.O_gamma / row.R_q, details["mean_accept_len"], rel_tol=1e-9),
        "work_conservation": not server["work_conservation_violations"],
        "distinct_tags": len(set(details["tags"])) == len(details["tags"]),
    }
    if len(details["tags"]) == 1:
        out["single_target_rates_equal"] = details["server_rounds"] == details["client_rounds"][0]
    return out


class _Children:
    """Tracks spawned processes so every exit path reaps them."""

    def __init__(self) -> None:
        self.procs: list[subprocess.Popen] = []

    def spawn(self, args: list[str], **kw) -> subprocess.Popen:
        proc = subprocess.Popen(args, **kw)
        self.procs.append(proc)
        return proc

    def reap(self) -> None:
        for p in self.procs:
            if p.poll() is None:
                p.kill()
            try:
                p.wait(timeout=5)
            except subprocess.TimeoutExpired:
                pass


def _read_ready(proc: subprocess.Popen, timeout: float) -> int:
    box: list[str] = []
    t = threading.Thread(target=lambda: box.append(proc.stdout.readline()), daemon=True)
    t.start()
    t.join(timeout)
    line = box[0] if box else ""
    if not line.startswith("READY "):
        proc.kill()
        _, err = proc.communicate()
        raise BenchError(f"draft server did not come up (got {line!r})", {"server": err})
    return int(line.split()[1])


def run_row(doc: Mapping[str, Any], n: int, workdir: Path, timeout: float = 60.0) -> tuple[dict, list[dict]]:
    """Spawn the server and N clients for one row; return their metric dumps."""
    py = [sys.executable, "-m", "stardraft"]
    cfg_path = workdir / f"bench_N{n}.json"
    cfg_path.write_text(json.dumps({**doc, "port": 0}))
    server_out = workdir / f"server_N{n}.json"
    children = _Children()
    try:
        server = children.spawn(
            py + ["serve-draft", "--config", str(cfg_path), "--out", str(server_out)],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        )
        port = _read_ready(server, timeout)
        client_outs = [workdir / f"client_N{n}_{i}.json" for i in range(n)]
        clients = [
            children.spawn(
                py + ["run-target", "--config", str(cfg_path), "--port", str(port), "--out", str(out)],
                stdout=subprocess.DEVNULL, stderr=subprocess.PIPE, text=True,
            )
            for out in client_outs
        ]
        logs = {}
        failed = False
        for i, proc in enumerate(clients):
            try:
                _, err = proc.communicate(timeout=timeout)
            except subprocess.TimeoutExpired:
                proc.kill()
                _, err = proc.communicate()
                err += "\n[timed out]"
            logs[f"client{i}"] = err
            failed |= proc.returncode != 0
        server.send_signal(signal.SIGINT)
        try:
            _, err = server.communicate(timeout=15)
        except subprocess.TimeoutExpired:
            server.kill()
            _, err = server.communicate()
        logs["server"] = err
        if failed or server.returncode != 0:
            raise BenchError(f"N={n}: a child process failed", logs)
        server_dump = json.loads(server_out.read_text())
        return server_dump, [json.loads(p.read_text()) for p in client_outs]
    finally:
        children.reap()


def run_bench(doc: Mapping[str, Any], n_list: Sequence[int], workdir: Path, base: Path | None = None,
              check_reference: bool = True) -> list[BenchRow]:
    params = decode_params(doc)
    target, draft = resolve_models(doc, base)
    # the children get inline models so relative paths cannot break
    child_doc = {**doc, "target": target.to_dict(), "draft": draft.to_dict()}
    child_doc.pop("epsilon", None)
    out = []
    for n in n_list:
        server, clients = run_row(child_doc, n, workdir, float(doc.get("timeout", 60.0)))
        row, details = aggregate(n, params["d"], server, clients)
        checks = _checks(row, details, server)
        if check_reference:
            same = True
            for c in clients:
                ref = reference_run(target, draft, params, tag=c["tag"])
                same &= c["generated"] == ref["speculative"] and c["accept_lengths"] == ref["accept_lengths"]
            checks["matches_reference"] = same
        details["outputs"] = {c["tag"]: c["generated"] for c in clients}
        out.append(BenchRow(row, checks, details))
    return out


def bench_table(rows: Sequence[BenchRow]) -> MetricsTable:
    return MetricsTable(r.row for r in rows)
