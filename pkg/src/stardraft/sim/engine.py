"""Event loop for one draft server feeding N targets.

Time is kept in integer picoseconds so that regime boundaries such as
``Z == (N - 1) * S`` are decided exactly. A request is served the moment the
server is free and the buffer is non-empty; a finished target re-enqueues
after its return time ``t_c + t_v``.
"""

from __future__ import annotations

import heapq
import itertools
import math
from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple

from ..core import DecodeSession
from ..core.rng import SeededRng, session_rng
from .config import SimConfig

TICKS_PER_SECOND = 10**12


class InvariantError(AssertionError):
    pass


class EventKind(IntEnum):
    # value doubles as the tie-break priority at equal times
    DRAFT_END = 0
    REQUEST_ARRIVAL = 1


class SimEvent(NamedTuple):
    time: int  # ticks
    kind: EventKind
    seq: int
    tag: int


@dataclass(frozen=True)
class IterationRecord:
    gamma: int  # position in the server's service order
    tag: int
    round: int  # per-tag round index
    enqueue_time: float
    start_time: float
    end_time: float
    return_time: float
    accept_len: int
    idle_before: float
    wait: float

    @property
    def service(self) -> float:
        return self.end_time - self.start_time


def to_ticks(seconds: float) -> int:
    return round(seconds * TICKS_PER_SECOND)


def _seconds(ticks: int) -> float:
    return ticks / TICKS_PER_SECOND


class _Acceptance:
    """Per-tag source of accept lengths."""

    def __init__(self, config: SimConfig, tag: int) -> None:
        self.d = config.d
        self.model = config.model
        if self.model is None:
            beta = config.beta_for(tag)
            self.log_beta = math.log(beta) if beta > 0 else -math.inf
            self.rng = session_rng(config.seed, tag, "sim")
        else:
            self.target_rng = session_rng(config.seed, tag, "target")
            self.draft_rng = session_rng(config.seed, tag, "draft")
            self.session: DecodeSession | None = None

    def next(self) -> int:
        if self.model is None:
            if self.log_beta == 0.0:
                return self.d
            u = 1.0 - self.rng.random()  # (0, 1]
            if self.log_beta == -math.inf:
                return 0
            # P(l >= j) = P(u <= beta**j) = beta**j, capped at d
            return min(self.d, int(math.log(u) / self.log_beta))
        if self.session is None or self.session.done:
            m = self.model
            self.session = DecodeSession(
                m.target, m.draft, m.prompt, self.d, m.k, m.max_tokens,
                self.target_rng, self.draft_rng, greedy=m.greedy,
            )
        return self.session.step().accept_length


def _stream(config: SimConfig, sampler, tag: int, quantity: int) -> SeededRng:
    if sampler.seed is not None:
        return SeededRng([sampler.seed, tag])
    return session_rng(config.seed, tag, "timing").spawn(quantity)


def run_sim(config: SimConfig) -> list[IterationRecord]:
    """Simulate until every target finishes its rounds (or the horizon passes).

    Requests that arrive at the same instant as a service completion are
    handled after it. Raises :class:`InvariantError` if the server is ever
    idle with a non-empty buffer.
    """
    n, d = config.N, config.d
    horizon = None if config.horizon is None else to_ticks(config.horizon)
    limit = config.rounds_per_target
    ts_rng = _stream(config, config.t_s, 0, 0)
    tc_rng = {tag: _stream(config, config.t_c, tag, 1) for tag in range(1, n + 1)}
    tv_rng = {tag: _stream(config, config.t_v, tag, 2) for tag in range(1, n + 1)}
    acceptance = {tag: _Acceptance(config, tag) for tag in range(1, n + 1)}
    rounds = dict.fromkeys(range(1, n + 1), 0)

    seq = itertools.count()
    events: list[SimEvent] = [SimEvent(0, EventKind.REQUEST_ARRIVAL, next(seq), tag) for tag in range(1, n + 1)]
    heapq.heapify(events)
    buffer: deque[tuple[int, int]] = deque()
    in_service: tuple | None = None  # (tag, enqueue, start, accept_len, idle)
    last_end = 0
    records: list[IterationRecord] = []

    fixed_ts = to_ticks(config.t_s.params[0]) if config.t_s.dist == "constant" else None
    fixed_z = None
    if config.t_c.dist == "constant" and config.t_v.dist == "constant":
        fixed_z = to_ticks(config.t_c.params[0]) + to_ticks(config.t_v.params[0])

    def start_service(now: int) -> None:
        nonlocal in_service
        tag, enq = buffer.popleft()
        idle = now - last_end
        if fixed_ts is not None and not config.idle_penalty:
            per_token = fixed_ts
        else:
            factor = config.penalty(_seconds(idle))
            per_token = to_ticks(config.t_s.draw(ts_rng) * factor)
        if per_token <= 0:
            raise InvariantError("draft time per token must be positive")
        in_service = (tag, enq, now, acceptance[tag].next(), idle)
        heapq.heappush(events, SimEvent(now + d * per_token, EventKind.DRAFT_END, next(seq), tag))

    while events:
        ev = heapq.heappop(events)
        now = ev.time
        if ev.kind is EventKind.DRAFT_END:
            assert in_service is not None and in_service[0] == ev.tag
            tag, enq, start, accept_len, idle = in_service
            if fixed_z is not None:
                back = now + fixed_z
            else:
                back = now + to_ticks(config.t_c.draw(tc_rng[tag])) + to_ticks(config.t_v.draw(tv_rng[tag]))
            records.append(
                IterationRecord(
                    gamma=len(records),
                    tag=tag,
                    round=rounds[tag],
                    enqueue_time=_seconds(enq),
                    start_time=_seconds(start),
                    end_time=_seconds(now),
                    return_time=_seconds(back),
                    accept_len=accept_len,
                    idle_before=_seconds(idle),
                    wait=_seconds(start - enq),
                )
            )
            rounds[tag] += 1
            in_service = None
            last_end = now
            more = rounds[tag] < limit if limit is not None else back < horizon
            if more:
                heapq.heappush(events, SimEvent(back, EventKind.REQUEST_ARRIVAL, next(seq), tag))
        else:
            buffer.append((ev.tag, now))
        if in_service is None and buffer:
            start_service(now)
        if in_service is None and buffer:
            raise InvariantError(f"server idle with {len(buffer)} buffered requests at t={now}")
    return records
