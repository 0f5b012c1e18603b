"""Simulation configuration: timing samplers, acceptance source, run length."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from statistics import NormalDist
from typing import Any, Mapping, Sequence

import numpy as np

from ..core import CategoricalModel, derive_draft, load_model, make_model
from ..core.rng import SeededRng

DISTRIBUTIONS = ("constant", "uniform", "normal", "exponential")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Sampler:
    """One timing quantity in seconds, constant or drawn per use."""

    dist: str
    params: tuple[float, ...]
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.dist not in DISTRIBUTIONS:
            raise ConfigError(f"unknown distribution {self.dist!r}")
        p = self.params
        need = {"constant": 1, "uniform": 2, "normal": 2, "exponential": 1}[self.dist]
        if len(p) != need or not all(math.isfinite(x) for x in p):
            raise ConfigError(f"{self.dist} sampler needs {need} finite parameters, got {p}")
        if self.dist == "constant" and p[0] < 0:
            raise ConfigError("constant time must be >= 0")
        if self.dist == "uniform" and not 0 <= p[0] <= p[1]:
            raise ConfigError("uniform sampler needs 0 <= low <= high")
        if self.dist == "normal" and p[1] < 0:
            raise ConfigError("normal sampler needs std >= 0")
        if self.dist == "exponential" and p[0] <= 0:
            raise ConfigError("exponential sampler needs mean > 0")

    @classmethod
    def constant(cls, value: float) -> "Sampler":
        return cls("constant", (float(value),))

    @classmethod
    def parse(cls, doc: Any) -> "Sampler":
        if isinstance(doc, Sampler):
            return doc
        if isinstance(doc, (int, float)) and not isinstance(doc, bool):
            return cls.constant(doc)
        if not isinstance(doc, Mapping) or "dist" not in doc:
            raise ConfigError(f"cannot read sampler from {doc!r}")
        names = {
            "constant": ("value",),
            "uniform": ("low", "high"),
            "normal": ("mean", "std"),
            "exponential": ("mean",),
        }.get(doc["dist"])
        if names is None:
            raise ConfigError(f"unknown distribution {doc['dist']!r}")
        try:
            params = tuple(float(doc[n]) for n in names)
        except KeyError as exc:
            raise ConfigError(f"{doc['dist']} sampler missing {exc}") from exc
        seed = doc.get("seed")
        return cls(doc["dist"], params, None if seed is None else int(seed))

    @property
    def deterministic(self) -> bool:
        if self.dist == "constant":
            return True
        if self.dist == "uniform":
            return self.params[0] == self.params[1]
        return self.dist == "normal" and self.params[1] == 0

    @property
    def mean(self) -> float:
        if self.dist == "uniform":
            return 0.5 * (self.params[0] + self.params[1])
        return self.params[0]

    def draw(self, rng: SeededRng) -> float:
        p = self.params
        if self.dist == "constant":
            return p[0]
        u = rng.random()
        if self.dist == "uniform":
            return p[0] + (p[1] - p[0]) * u
        if self.dist == "exponential":
            return -p[0] * math.log1p(-u)
        if p[1] == 0:
            return max(0.0, p[0])
        # inverse CDF keeps one uniform per draw; clipped at zero
        return max(0.0, NormalDist(p[0], p[1]).inv_cdf(max(u, 1e-300)))

    def to_dict(self) -> Any:
        if self.dist == "constant" and self.seed is None:
            return self.params[0]
        names = {
            "constant": ("value",),
            "uniform": ("low", "high"),
            "normal": ("mean", "std"),
            "exponential": ("mean",),
        }[self.dist]
        out: dict[str, Any] = {"dist": self.dist, **dict(zip(names, self.params))}
        if self.seed is not None:
            out["seed"] = self.seed
        return out


@dataclass(frozen=True)
class ModelAcceptance:
    """Real draft/verify rounds drive the accept lengths."""

    target: CategoricalModel
    draft: CategoricalModel
    prompt: tuple[int, ...] = (0,)
    k: int = 1
    max_tokens: int = 64
    greedy: bool = False


@dataclass(frozen=True)
class SimConfig:
    N: int
    d: int
    t_s: Sampler
    t_c: Sampler
    t_v: Sampler
    betas: tuple[float, ...] | None = None
    model: ModelAcceptance | None = None
    rounds_per_target: int | None = 200
    horizon: float | None = None
    warmup_rounds: int | None = None
    idle_penalty: tuple[tuple[float, float], ...] | None = None
    seed: int = 0
    source: dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.N < 1 or self.d < 1:
            raise ConfigError("N and d must be >= 1")
        if (self.betas is None) == (self.model is None):
            raise ConfigError("set exactly one of fixed beta or model-driven acceptance")
        if self.betas is not None:
            if len(self.betas) != 1 and len(self.betas) < self.N:
                raise ConfigError(f"got {len(self.betas)} betas for N={self.N}")
            if not all(0.0 <= b <= 1.0 for b in self.betas):
                raise ConfigError("beta must lie in [0, 1]")
        if (self.rounds_per_target is None) == (self.horizon is None):
            raise ConfigError("set exactly one of rounds_per_target or horizon")
        if self.rounds_per_target is not None and self.rounds_per_target < 1:
            raise ConfigError("rounds_per_target must be >= 1")
        if self.horizon is not None and not self.horizon > 0:
            raise ConfigError("horizon must be > 0")
        if self.warmup_rounds is not None:
            if self.warmup_rounds < 0:
                raise ConfigError("warmup_rounds must be >= 0")
            if self.rounds_per_target is not None and self.warmup_rounds >= self.rounds_per_target:
                raise ConfigError("warmup_rounds must be < rounds_per_target")
        if self.idle_penalty is not None:
            xs = [x for x, _ in self.idle_penalty]
            if not xs or any(b <= a for a, b in zip(xs, xs[1:])) or xs[0] < 0:
                raise ConfigError("idle_penalty idle points must be >= 0 and strictly increasing")
            if any(f <= 0 for _, f in self.idle_penalty):
                raise ConfigError("idle_penalty factors must be > 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 unsigned bits")

    @property
    def deterministic_timing(self) -> bool:
        return all(s.deterministic for s in (self.t_s, self.t_c, self.t_v)) and not self.idle_penalty

    def beta_for(self, tag: int) -> float:
        assert self.betas is not None
        return self.betas[0] if len(self.betas) == 1 else self.betas[tag - 1]

    def warmup_for(self, completed: int) -> int:
        """Rounds excluded per tag; defaults to the first 10%."""
        if self.warmup_rounds is not None:
            return min(self.warmup_rounds, max(completed - 1, 0))
        return completed // 10

    def penalty(self, idle: float) -> float:
        if not self.idle_penalty:
            return 1.0
        xs, fs = zip(*self.idle_penalty)
        return float(np.interp(idle, xs, fs))

    def with_n(self, n: int) -> "SimConfig":
        return replace(self, N=n)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "N": self.N,
            "d": self.d,
            "timing": {"t_s": self.t_s.to_dict(), "t_c": self.t_c.to_dict(), "t_v": self.t_v.to_dict()},
            "seed": self.seed,
        }
        if self.betas is not None:
            out["acceptance"] = {"betas": list(self.betas)}
        else:
            out["acceptance"] = self.source.get("acceptance", {"model": "<in-memory>"})
        if self.rounds_per_target is not None:
            out["rounds_per_target"] = self.rounds_per_target
        else:
            out["horizon"] = self.horizon
        if self.warmup_rounds is not None:
            out["warmup_rounds"] = self.warmup_rounds
        if self.idle_penalty:
            out["idle_penalty"] = [list(p) for p in self.idle_penalty]
        return out


def _model_from(doc: Any, base: Path | None) -> CategoricalModel:
    if isinstance(doc, CategoricalModel):
        return doc
    if isinstance(doc, str):
        path = Path(doc)
        if base is not None and not path.is_absolute():
            path = base / path
        return load_model(path)
    return make_model(doc)


def _parse_model_acceptance(doc: Mapping[str, Any], base: Path | None) -> ModelAcceptance:
    if "target" not in doc:
        raise ConfigError("model acceptance needs a 'target' model")
    target = _model_from(doc["target"], base)
    if doc.get("draft") is not None:
        draft = _model_from(doc["draft"], base)
    elif "epsilon" in doc:
        draft = derive_draft(target, float(doc["epsilon"]))
    else:
        raise ConfigError("model acceptance needs 'draft' or 'epsilon'")
    prompt = tuple(int(t) for t in doc.get("prompt", [0]))
    return ModelAcceptance(
        target=target,
        draft=draft,
        prompt=prompt,
        k=int(doc.get("k", 1)),
        max_tokens=int(doc.get("max_tokens", 64)),
        greedy=bool(doc.get("greedy", False)),
    )


def config_from_dict(doc: Mapping[str, Any], base: Path | None = None) -> SimConfig:
    """Build a SimConfig from its JSON form; relative model paths resolve against ``base``."""
    try:
        timing = doc.get("timing", {})
        for key in ("t_s", "t_c", "t_v"):
            if key not in timing:
                raise ConfigError(f"timing.{key} missing")
        acc = doc.get("acceptance")
        if not isinstance(acc, Mapping):
            raise ConfigError("acceptance section missing")
        n = int(doc["N"])
        betas = model = None
        keys = [k for k in ("beta", "betas", "model") if k in acc]
        if len(keys) != 1:
            raise ConfigError("acceptance needs exactly one of beta, betas, model")
        if "beta" in acc:
            betas = (float(acc["beta"]),)
        elif "betas" in acc:
            betas = tuple(float(b) for b in acc["betas"])
        else:
            model = _parse_model_acceptance(acc["model"], base)
        rounds = doc.get("rounds_per_target")
        horizon = doc.get("horizon")
        if rounds is None and horizon is None:
            rounds = 200
        penalty = doc.get("idle_penalty")
        return SimConfig(
            N=n,
            d=int(doc["d"]),
            t_s=Sampler.parse(timing["t_s"]),
            t_c=Sampler.parse(timing["t_c"]),
            t_v=Sampler.parse(timing["t_v"]),
            betas=betas,
            model=model,
            rounds_per_target=None if rounds is None else int(rounds),
            horizon=None if horizon is None else float(horizon),
            warmup_rounds=None if doc.get("warmup_rounds") is None else int(doc["warmup_rounds"]),
            idle_penalty=None if not penalty else tuple((float(x), float(f)) for x, f in penalty),
            seed=int(doc.get("seed", 0)),
            source=dict(doc),
        )
    except KeyError as exc:
        raise ConfigError(f"missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> SimConfig:
    path = Path(path)
    with path.open() as fh:
        return config_from_dict(json.load(fh), base=path.parent)


def fixed_config(
    N: int,
    d: int,
    t_s: float,
    t_c: float,
    t_v: float,
    beta: float | Sequence[float],
    rounds_per_target: int = 200,
    **extra: Any,
) -> SimConfig:
    """Shorthand for deterministic timing with fixed acceptance rates."""
    betas = (float(beta),) if isinstance(beta, (int, float)) else tuple(float(b) for b in beta)
    return SimConfig(
        N=N,
        d=d,
        t_s=Sampler.constant(t_s),
        t_c=Sampler.constant(t_c),
        t_v=Sampler.constant(t_v),
        betas=betas,
        rounds_per_target=rounds_per_target,
        **extra,
    )
