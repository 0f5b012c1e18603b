"""Measured metrics over simulator records, sweeps, and record I/O."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .config import SimConfig
from .engine import IterationRecord, run_sim

RECORD_COLUMNS = ("gamma", "tag", "enqueue", "start", "end", "return", "accept_len", "idle_before", "wait")


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class RunMetrics:
    N: int
    R_q: float
    R_p_per_target: tuple[float, ...]
    O_gamma: float
    O_per_target: tuple[float, ...]
    mean_T_idle: float  # per server iteration (N services)
    mean_T_wait: float  # per request
    load: float
    mean_accept_len: float
    mean_t_s: float  # measured per-token draft time
    rounds: int
    horizon: float

    @property
    def R_p(self) -> float:
        return sum(self.R_p_per_target) / len(self.R_p_per_target)

    @property
    def O_per_target_mean(self) -> float:
        return sum(self.O_per_target) / len(self.O_per_target)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["R_p_per_target"] = list(self.R_p_per_target)
        out["O_per_target"] = list(self.O_per_target)
        return out


def drop_warmup(records: Sequence[IterationRecord], config: SimConfig) -> list[IterationRecord]:
    """Keep records past each tag's warmup rounds."""
    completed: dict[int, int] = defaultdict(int)
    for r in records:
        completed[r.tag] += 1
    cut = {tag: config.warmup_for(c) for tag, c in completed.items()}
    return [r for r in records if r.round >= cut[r.tag]]


def compute_metrics(
    records: Sequence[IterationRecord],
    horizon: float | None = None,
    d: int | None = None,
    n_targets: int | None = None,
) -> RunMetrics:
    """Rates over ``horizon`` seconds (default: first enqueue to last return)."""
    if not records:
        raise MetricsError("no records to measure")
    if horizon is None:
        horizon = max(r.return_time for r in records) - min(r.enqueue_time for r in records)
    if not horizon > 0:
        raise MetricsError("measurement horizon must be > 0")
    tags = sorted({r.tag for r in records})
    n = n_targets if n_targets is not None else len(tags)
    counts: dict[int, int] = defaultdict(int)
    tokens: dict[int, int] = defaultdict(int)
    for r in records:
        counts[r.tag] += 1
        tokens[r.tag] += r.accept_len
    total_tokens = sum(tokens.values())
    busy = math.fsum(r.service for r in records)
    idle = math.fsum(r.idle_before for r in records)
    return RunMetrics(
        N=n,
        R_q=len(records) / horizon,
        R_p_per_target=tuple(counts[t] / horizon for t in tags),
        O_gamma=total_tokens / horizon,
        O_per_target=tuple(tokens[t] / horizon for t in tags),
        mean_T_idle=idle / (len(records) / n),
        mean_T_wait=math.fsum(r.wait for r in records) / len(records),
        load=min(1.0, busy / horizon),
        mean_accept_len=total_tokens / len(records),
        mean_t_s=busy / len(records) / d if d else float("nan"),
        rounds=len(records),
        horizon=horizon,
    )


def simulate(config: SimConfig) -> tuple[list[IterationRecord], RunMetrics]:
    """Run once and measure the post-warmup records."""
    records = run_sim(config)
    steady = drop_warmup(records, config)
    return records, compute_metrics(steady, d=config.d, n_targets=config.N)


def sweep(base: SimConfig, n_list: Iterable[int]) -> list[RunMetrics]:
    """One run per N.

    Every run uses the base seed, so a given tag sees the same timing and
    acceptance draws whatever N is (common random numbers across rows).
    """
    return [simulate(base.with_n(n))[1] for n in n_list]


def check_work_conservation(records: Sequence[IterationRecord]) -> list[str]:
    """Log-level check: any idle gap must end with a fresh arrival."""
    problems = []
    ordered = sorted(records, key=lambda r: r.gamma)
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.idle_before > 0 and (cur.enqueue_time <= prev.end_time or cur.wait > 0):
            problems.append(f"gamma {cur.gamma}: idle {cur.idle_before} with request queued since {cur.enqueue_time}")
    return problems


def check_record_order(records: Sequence[IterationRecord]) -> list[str]:
    problems = []
    last_enqueue: dict[int, float] = {}
    for r in sorted(records, key=lambda r: r.gamma):
        if not r.enqueue_time <= r.start_time <= r.end_time <= r.return_time:
            problems.append(f"gamma {r.gamma}: timestamps out of order")
        if r.wait < 0 or r.idle_before < 0:
            problems.append(f"gamma {r.gamma}: negative wait or idle")
        if r.enqueue_time < last_enqueue.get(r.tag, -math.inf):
            problems.append(f"gamma {r.gamma}: tag {r.tag} served out of FIFO order")
        last_enqueue[r.tag] = r.enqueue_time
    return problems


def write_records_csv(records: Sequence[IterationRecord], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        w.writerow([
            r.gamma, r.tag, repr(r.enqueue_time), repr(r.start_time), repr(r.end_time),
            repr(r.return_time), r.accept_len, repr(r.idle_before), repr(r.wait),
        ])


def read_records_csv(fh) -> list[IterationRecord]:
    reader = csv.reader(fh)
    header = next(reader)
    if tuple(header) != RECORD_COLUMNS:
        raise MetricsError(f"unexpected record header {header}")
    seen: dict[int, int] = defaultdict(int)
    out = []
    for row in reader:
        tag = int(row[1])
        out.append(IterationRecord(
            gamma=int(row[0]), tag=tag, round=seen[tag],
            enqueue_time=float(row[2]), start_time=float(row[3]), end_time=float(row[4]),
            return_time=float(row[5]), accept_len=int(row[6]), idle_before=float(row[7]), wait=float(row[8]),
        ))
        seen[tag] += 1
    return out


def records_to_csv(records: Sequence[IterationRecord]) -> str:
    buf = io.StringIO()
    write_records_csv(records, buf)
    return buf.getvalue()


def save_metrics_json(metrics: RunMetrics, path: str | Path) -> None:
    Path(path).write_text(json.dumps(metrics.to_dict(), indent=2) + "\n")
