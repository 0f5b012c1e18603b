"""Closed-form progress, timing and throughput model of one draft server.

All times are in seconds. ``S = d * t_s`` is the draft-side service time of
one request and ``Z = t_c + t_v`` the return time before the same target can
re-request. A work-conserving server with N targets idles for
``max(0, Z - (N - 1) * S)`` per iteration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Mapping, Sequence

logger = logging.getLogger(__name__)

# relative slack absorbing float noise in comparisons like 0.03 vs 3 * 0.01
REL_TOL = 1e-12
N_CAP = 64

CSV_COLUMNS = (
    "N",
    "d",
    "t_s",
    "t_c",
    "t_v",
    "S",
    "Z",
    "T_idle",
    "T_gamma",
    "E_l_total",
    "O_gamma",
    "O_per_target_mean",
    "N_full",
    "R_q_pred",
    "R_p_pred",
)


class ParamError(ValueError):
    pass


@dataclass(frozen=True)
class TimingParams:
    t_s: float
    t_c: float
    t_v: float
    d: int
    N: int = 1

    def __post_init__(self) -> None:
        if not self.t_s > 0:
            raise ParamError("t_s must be > 0")
        if self.t_c < 0 or self.t_v < 0:
            raise ParamError("t_c and t_v must be >= 0")
        if self.d < 1 or self.N < 1:
            raise ParamError("d and N must be >= 1")

    def with_n(self, n: int) -> "TimingParams":
        return TimingParams(self.t_s, self.t_c, self.t_v, self.d, n)


@dataclass(frozen=True)
class AcceptanceParams:
    betas: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not self.betas:
            raise ParamError("need at least one acceptance rate")
        for b in self.betas:
            if not 0.0 <= b <= 1.0:
                raise ParamError(f"acceptance rate {b} outside [0, 1]")

    @classmethod
    def uniform(cls, beta: float, n: int) -> "AcceptanceParams":
        return cls((beta,) * n)


@dataclass(frozen=True)
class Prediction:
    N: int
    d: int
    t_s: float
    t_c: float
    t_v: float
    S: float
    Z: float
    E_l_per_target: tuple[float, ...]
    E_l_total: float
    T_idle: float
    T_gamma: float
    O_gamma: float
    O_per_target: tuple[float, ...]
    N_full: int
    fully_loaded: bool
    R_q_pred: float
    R_p_pred: float
    load: float
    T_wait: float

    @property
    def O_per_target_mean(self) -> float:
        return sum(self.O_per_target) / len(self.O_per_target)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["E_l_per_target"] = list(self.E_l_per_target)
        out["O_per_target"] = list(self.O_per_target)
        out["O_per_target_mean"] = self.O_per_target_mean
        return out

    def csv_row(self) -> list[Any]:
        values = self.to_dict()
        return [values[c] for c in CSV_COLUMNS]


def expected_accept_length(beta: float, d: int) -> float:
    """``sum_{j=1..d} beta**j``; equals d at beta = 1."""
    if not 0.0 <= beta <= 1.0:
        raise ParamError(f"beta {beta} outside [0, 1]")
    if d < 1:
        raise ParamError("d must be >= 1")
    if beta == 1.0:
        return float(d)
    if beta > 0.999:
        # closed form cancels catastrophically next to the singularity
        return math.fsum(beta**j for j in range(1, d + 1))
    return beta * (1.0 - beta**d) / (1.0 - beta)


def expected_total(acc: AcceptanceParams | Sequence[float], d: int) -> float:
    betas = acc.betas if isinstance(acc, AcceptanceParams) else tuple(acc)
    if not betas:
        raise ParamError("need at least one acceptance rate")
    return math.fsum(expected_accept_length(b, d) for b in betas)


def service_time(p: TimingParams) -> float:
    return p.d * p.t_s


def return_time(p: TimingParams) -> float:
    return p.t_c + p.t_v


def _uncovered(z: float, s: float, n: int) -> float:
    """``z - (n - 1) * s`` snapped to 0 when inside float noise."""
    covered = (n - 1) * s
    gap = z - covered
    if gap <= REL_TOL * max(z, covered, s):
        return 0.0 if gap >= -REL_TOL * max(z, covered, s) else gap
    return gap


def idle_gap(p: TimingParams) -> float:
    return max(0.0, _uncovered(return_time(p), service_time(p), p.N))


def is_fully_loaded(p: TimingParams) -> bool:
    return _uncovered(return_time(p), service_time(p), p.N) <= 0.0


def iteration_time(p: TimingParams) -> float:
    return p.N * service_time(p) + idle_gap(p)


def n_full(p: TimingParams) -> int:
    """Smallest N for which the return time is fully overlapped."""
    s, z = service_time(p), return_time(p)
    if s <= 0:
        raise ParamError("service time must be > 0")
    n = math.ceil(z / s) + 1
    # the ratio itself can land one ulp off an integer; settle on the exact rule
    while n > 1 and _uncovered(z, s, n - 1) <= 0.0:
        n -= 1
    while _uncovered(z, s, n) > 0.0:
        n += 1
    return n


def predicted_steady_state(p: TimingParams) -> dict[str, float]:
    """Deterministic steady state: per-target round rate and queueing wait."""
    s, z = service_time(p), return_time(p)
    t_gamma = iteration_time(p)
    wait = max(0.0, -_uncovered(z, s, p.N))
    return {"R_p": 1.0 / t_gamma, "T_wait": wait, "T_idle": idle_gap(p), "T_gamma": t_gamma}


def throughput(p: TimingParams, acc: AcceptanceParams | Sequence[float] | float) -> Prediction:
    if isinstance(acc, (int, float)):
        acc = AcceptanceParams.uniform(float(acc), p.N)
    elif not isinstance(acc, AcceptanceParams):
        acc = AcceptanceParams(tuple(acc))
    if len(acc.betas) == 1 and p.N > 1:
        acc = AcceptanceParams.uniform(acc.betas[0], p.N)
    if len(acc.betas) != p.N:
        raise ParamError(f"got {len(acc.betas)} acceptance rates for N={p.N}")
    s, z = service_time(p), return_time(p)
    e_l = tuple(expected_accept_length(b, p.d) for b in acc.betas)
    e_total = math.fsum(e_l)
    t_idle = idle_gap(p)
    t_gamma = p.N * s + t_idle
    steady = predicted_steady_state(p)
    return Prediction(
        N=p.N,
        d=p.d,
        t_s=p.t_s,
        t_c=p.t_c,
        t_v=p.t_v,
        S=s,
        Z=z,
        E_l_per_target=e_l,
        E_l_total=e_total,
        T_idle=t_idle,
        T_gamma=t_gamma,
        O_gamma=e_total / t_gamma,
        O_per_target=tuple(e / t_gamma for e in e_l),
        N_full=n_full(p),
        fully_loaded=is_fully_loaded(p),
        R_q_pred=p.N / t_gamma,
        R_p_pred=1.0 / t_gamma,
        load=p.N * s / t_gamma,
        T_wait=steady["T_wait"],
    )


def n_max(
    p: TimingParams,
    acc: AcceptanceParams | Sequence[float] | float,
    standalone_rate: float,
    n_cap: int = N_CAP,
) -> int:
    """Largest N whose per-target throughput stays at or above ``standalone_rate``.

    The admission check uses the smallest of the given acceptance rates. A
    return value equal to ``n_cap`` means the search hit the cap.
    """
    if isinstance(acc, (int, float)):
        beta = float(acc)
    else:
        betas = acc.betas if isinstance(acc, AcceptanceParams) else tuple(acc)
        beta = min(betas)
    if standalone_rate <= 0:
        logger.warning("standalone rate %r <= 0: admission unbounded, capped at %d", standalone_rate, n_cap)
        return n_cap
    best = 0
    for n in range(1, n_cap + 1):
        pred = throughput(p.with_n(n), beta)
        if pred.O_per_target[0] >= standalone_rate:
            best = n
        elif n >= pred.N_full:
            # per-target throughput only falls from here on
            break
    if best == n_cap:
        logger.warning("admission limit reached the cap N=%d", n_cap)
    return best


def params_from_dict(doc: Mapping[str, Any]) -> tuple[TimingParams, AcceptanceParams]:
    """Parse ``{"t_s", "t_c", "t_v", "d", "N", "beta" | "betas"}`` (seconds)."""
    try:
        timing = TimingParams(
            t_s=float(doc["t_s"]),
            t_c=float(doc.get("t_c", 0.0)),
            t_v=float(doc.get("t_v", 0.0)),
            d=int(doc["d"]),
            N=int(doc.get("N", 1)),
        )
    except KeyError as exc:
        raise ParamError(f"missing field {exc}") from exc
    if "betas" in doc:
        acc = AcceptanceParams(tuple(doc["betas"]))
    elif "beta" in doc:
        acc = AcceptanceParams.uniform(float(doc["beta"]), timing.N)
    else:
        raise ParamError("need 'beta' or 'betas'")
    return timing, acc
