"""Benchmark-style metrics rows with a unit-annotated CSV header."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields
from typing import Iterable

COLUMNS = (
    ("N", ""),
    ("O_gamma", "tokens/s"),
    ("O_per_target", "tokens/s"),
    ("t_s", "ms"),
    ("T_wait", "ms"),
    ("T_idle", "ms"),
    ("R_q", "rounds/s"),
    ("R_p", "rounds/s"),
    ("load", "%"),
)
HEADER = tuple(f"{name}[{unit}]" if unit else name for name, unit in COLUMNS)


@dataclass(frozen=True)
class MetricsRow:
    N: int
    O_gamma: float
    O_per_target: float
    t_s: float  # ms
    T_wait: float  # ms
    T_idle: float  # ms
    R_q: float
    R_p: float
    load: float  # percent

    @classmethod
    def from_seconds(cls, N, O_gamma, O_per_target, t_s, T_wait, T_idle, R_q, R_p, load_fraction) -> "MetricsRow":
        return cls(N, O_gamma, O_per_target, t_s * 1e3, T_wait * 1e3, T_idle * 1e3, R_q, R_p, load_fraction * 100.0)

    @classmethod
    def from_run(cls, m) -> "MetricsRow":
        """Convert a simulator RunMetrics."""
        return cls.from_seconds(m.N, m.O_gamma, m.O_per_target_mean, m.mean_t_s, m.mean_T_wait,
                                m.mean_T_idle, m.R_q, m.R_p, m.load)


class MetricsTable:
    def __init__(self, rows: Iterable[MetricsRow] = ()) -> None:
        self.rows = list(rows)

    def add(self, row: MetricsRow) -> None:
        self.rows.append(row)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEADER)
        for r in self.rows:
            w.writerow([r.N] + [repr(float(getattr(r, f.name))) for f in fields(r)[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if tuple(header) != HEADER:
            raise ValueError(f"unexpected metrics header {header}")
        return cls(MetricsRow(int(row[0]), *(float(x) for x in row[1:])) for row in reader)

    def to_json(self) -> list[dict]:
        return [asdict(r) for r in self.rows]

    def __len__(self) -> int:
        return len(self.rows)
