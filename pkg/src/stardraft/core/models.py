"""Tabular order-m next-token models over a small vocabulary."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

START = -1  # reserved context padding marker, never a token id
NORM_TOL = 1e-12


class ModelError(ValueError):
    pass


def _check_dist(vec: np.ndarray, vocab_size: int, what: str) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (vocab_size,):
        raise ModelError(f"{what}: expected {vocab_size} probabilities, got shape {vec.shape}")
    if np.any(vec < 0.0) or not np.all(np.isfinite(vec)):
        raise ModelError(f"{what}: probabilities must be finite and non-negative")
    if abs(vec.sum() - 1.0) > NORM_TOL:
        raise ModelError(f"{what}: probabilities sum to {vec.sum()!r}, not 1")
    vec.setflags(write=False)
    return vec


def _normalize(vec: np.ndarray) -> np.ndarray:
    out = vec / vec.sum()
    # push the residual rounding into the largest entry so the sum is 1 to ~1 ulp
    out[np.argmax(out)] += 1.0 - out.sum()
    return out


@dataclass(frozen=True, eq=False)
class CategoricalModel:
    """Order-m conditional next-token table.

    A context is the last ``order`` tokens of the prefix, left-padded with
    ``START``. Rows come from an explicit table, or are generated lazily and
    deterministically from ``generator_seed`` (normalized uniform variates).
    Contexts not in the table resolve to ``default`` (uniform if unset).

    ``mixture`` blends every row toward uniform (the draft-derivation knob);
    ``greedy`` turns every row into a one-hot on its argmax (lowest id wins).
    """

    vocab_size: int
    order: int
    eos: int | None = None
    rows: Mapping[tuple[int, ...], np.ndarray] = field(default_factory=dict)
    default: np.ndarray | None = None
    generator_seed: int | None = None
    mixture: float = 0.0
    greedy: bool = False
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ModelError("vocab_size must be >= 2")
        if self.order < 0:
            raise ModelError("order must be >= 0")
        if self.eos is not None and not 0 <= self.eos < self.vocab_size:
            raise ModelError(f"eos {self.eos} outside vocabulary")
        if not 0.0 <= self.mixture <= 1.0:
            raise ModelError("mixture must be in [0, 1]")
        checked = {}
        for ctx, vec in self.rows.items():
            ctx = tuple(int(t) for t in ctx)
            if len(ctx) != self.order:
                raise ModelError(f"context {ctx} has length {len(ctx)}, order is {self.order}")
            self._check_context(ctx)
            checked[ctx] = _check_dist(vec, self.vocab_size, f"row {ctx}")
        object.__setattr__(self, "rows", checked)
        if self.default is not None:
            object.__setattr__(self, "default", _check_dist(self.default, self.vocab_size, "default"))

    def _check_context(self, ctx: tuple[int, ...]) -> None:
        seen_token = False
        for t in ctx:
            if t == START:
                if seen_token:
                    raise ModelError(f"context {ctx}: START padding must be leading")
            elif 0 <= t < self.vocab_size:
                seen_token = True
            else:
                raise ModelError(f"context {ctx}: token {t} outside vocabulary")

    def context(self, prefix: Sequence[int]) -> tuple[int, ...]:
        """Start-padded window of the last ``order`` tokens of ``prefix``."""
        m = self.order
        if m == 0:
            return ()
        tail = tuple(prefix[-m:])
        if len(tail) < m:
            tail = (START,) * (m - len(tail)) + tail
        return tail

    def row(self, ctx: tuple[int, ...]) -> np.ndarray:
        cached = self._cache.get(ctx)
        if cached is not None:
            return cached
        vec = self.rows.get(ctx)
        if vec is None:
            if self.generator_seed is not None:
                vec = self._generated_row(ctx)
            elif self.default is not None:
                vec = self.default
            else:
                vec = np.full(self.vocab_size, 1.0 / self.vocab_size)
        if self.mixture:
            vec = (1.0 - self.mixture) * vec + self.mixture / self.vocab_size
        if self.greedy:
            onehot = np.zeros(self.vocab_size)
            onehot[int(np.argmax(vec))] = 1.0
            vec = onehot
        vec = np.array(vec, dtype=np.float64)
        vec.setflags(write=False)
        self._cache[ctx] = vec
        return vec

    def _generated_row(self, ctx: tuple[int, ...]) -> np.ndarray:
        # START is -1; shift by 1 so every SeedSequence word is non-negative
        words = [int(self.generator_seed), self.order, *(t + 1 for t in ctx)]
        gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
        return _normalize(gen.random(self.vocab_size))

    def next_dist(self, prefix: Sequence[int]) -> np.ndarray:
        """Next-token distribution after ``prefix`` (read-only array)."""
        return self.row(self.context(prefix))

    def as_greedy(self) -> "CategoricalModel":
        return replace(self, greedy=True, _cache={})

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "vocab_size": self.vocab_size,
            "order": self.order,
            "eos": self.eos,
        }
        if self.rows:
            out["rows"] = [
                {"context": list(ctx), "probs": [float(x) for x in vec]}
                for ctx, vec in sorted(self.rows.items())
            ]
        if self.default is not None:
            out["default"] = [float(x) for x in self.default]
        if self.generator_seed is not None:
            out["generator"] = {"seed": self.generator_seed}
        if self.mixture:
            out["mixture"] = self.mixture
        if self.greedy:
            out["greedy"] = True
        return out

    def fingerprint(self) -> int:
        """64-bit digest of the canonical JSON description."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def make_model(spec: Mapping[str, Any]) -> CategoricalModel:
    """Build a model from its JSON description (see README for the schema)."""
    try:
        vocab_size = int(spec["vocab_size"])
        order = int(spec.get("order", 0))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"bad model spec: {exc}") from exc
    rows_spec = spec.get("rows")
    generator = spec.get("generator")
    if rows_spec is None and generator is None:
        raise ModelError("model spec needs 'rows' or 'generator'")
    rows = {}
    for entry in rows_spec or ():
        ctx = tuple(int(t) for t in entry["context"])
        if ctx in rows:
            raise ModelError(f"duplicate context {ctx}")
        rows[ctx] = np.asarray(entry["probs"], dtype=np.float64)
    eos = spec.get("eos")
    return CategoricalModel(
        vocab_size=vocab_size,
        order=order,
        eos=None if eos is None else int(eos),
        rows=rows,
        default=None if spec.get("default") is None else np.asarray(spec["default"], dtype=np.float64),
        generator_seed=None if generator is None else int(generator["seed"]),
        mixture=float(spec.get("mixture", 0.0)),
        greedy=bool(spec.get("greedy", False)),
    )


def derive_draft(target: CategoricalModel, epsilon: float) -> CategoricalModel:
    """Draft whose every row is ``(1 - eps) * p_row + eps * uniform``."""
    if not 0.0 <= epsilon <= 1.0:
        raise ModelError(f"epsilon must be in [0, 1], got {epsilon}")
    if target.greedy:
        raise ModelError("derive the draft from the sampling target, not its greedy view")
    # composing mixtures: (1-b)((1-a)p + a u) + b u = (1-a)(1-b) p + (1 - (1-a)(1-b)) u
    mixed = 1.0 - (1.0 - target.mixture) * (1.0 - epsilon)
    return replace(target, mixture=mixed, _cache={})


def load_model(path: str | Path) -> CategoricalModel:
    with open(path) as fh:
        return make_model(json.load(fh))


def save_model(model: CategoricalModel, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=1)


def all_contexts(model: CategoricalModel) -> Iterable[tuple[int, ...]]:
    """Every reachable context: j leading START markers then order-j tokens."""
    m, v = model.order, model.vocab_size
    if m == 0:
        yield ()
        return
    for pad in range(m, -1, -1):
        for tail in np.ndindex(*([v] * (m - pad))):
            yield (START,) * pad + tuple(int(t) for t in tail)
