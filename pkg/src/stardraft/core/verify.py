"""Stochastic verification of draft paths and trees."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .models import NORM_TOL, CategoricalModel
from .rng import SeededRng
from .tree import DraftTree


def acceptance_beta(p: Sequence[float], q: Sequence[float]) -> float:
    """Overlap ``sum_x min(p(x), q(x))``, i.e. one minus total variation."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return float(np.minimum(p, q).sum())


def residual(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``norm(max(0, p - q))``; falls back to ``p`` when nothing is left."""
    res = np.maximum(p - q, 0.0)
    total = res.sum()
    if total <= NORM_TOL:
        return p
    return res / total


@dataclass(frozen=True)
class AcceptOutcome:
    accept_length: int
    accepted_tokens: tuple[int, ...]
    correction: int | None  # present iff accept_length < depth
    bonus: int | None  # present iff the whole path was accepted
    path_index: int = 0

    @property
    def continuation(self) -> tuple[int, ...]:
        """Accepted tokens plus the one extra (corrected or bonus) token."""
        extra = self.correction if self.correction is not None else self.bonus
        return self.accepted_tokens + (extra,)


def verify_path(
    target: CategoricalModel,
    draft: CategoricalModel,
    prefix: Sequence[int],
    path: Sequence[int],
    rng: SeededRng,
    path_index: int = 0,
) -> AcceptOutcome:
    """Walk ``path`` with the ratio test ``r <= min(1, p(x)/q(x))``.

    On the first rejection one token is drawn from the residual of the
    target over the draft at that position; if the whole path survives, a
    bonus token is drawn from the target after it. Draws are taken lazily,
    so a path rejected at step i consumes i + 1 draws in total.
    """
    prefix = list(prefix)
    path = [int(t) for t in path]
    for i, x in enumerate(path):
        ctx = prefix + path[:i]
        p = target.next_dist(ctx)
        q = draft.next_dist(ctx)
        qx = q[x]
        # a zero-mass draft token cannot have been proposed legitimately
        ratio = 0.0 if qx <= 0.0 else min(1.0, p[x] / qx)
        if not rng.bernoulli(ratio):
            fix = rng.categorical(residual(p, q))
            return AcceptOutcome(i, tuple(path[:i]), fix, None, path_index)
    bonus = rng.categorical(target.next_dist(prefix + path))
    return AcceptOutcome(len(path), tuple(path), None, bonus, path_index)


def verify_tree(
    target: CategoricalModel,
    draft: CategoricalModel,
    prefix: Sequence[int],
    tree: DraftTree,
    rng: SeededRng,
) -> AcceptOutcome:
    """Verify every root-to-leaf path; keep the longest (lowest index on ties)."""
    best: AcceptOutcome | None = None
    for idx, path in enumerate(tree.token_paths()):
        out = verify_path(target, draft, prefix, path, rng, path_index=idx)
        if best is None or out.accept_length > best.accept_length:
            best = out
    if best is None:
        raise ValueError("empty draft tree")
    return best
