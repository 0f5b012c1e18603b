"""Seeded random streams.

Every random decision in drafting and verification goes through one of the
three primitives on :class:`SeededRng` (``random``, ``bernoulli``,
``categorical``). Keeping the surface this small lets tests substitute an
enumerating stream and compute exact output distributions of the real code.
"""

from __future__ import annotations

import numpy as np

_ROLES = {"draft": 1, "target": 2, "sim": 3, "timing": 4}


class SeededRng:
    """PCG64 stream; identical seed and call sequence give identical draws."""

    def __init__(self, seed: int | list[int] = 0) -> None:
        entropy = [seed] if isinstance(seed, int) else list(seed)
        for part in entropy:
            if part < 0 or part >= 2**64:
                raise ValueError(f"seed parts must fit in 64 unsigned bits, got {part}")
        self.seed = entropy[0] if len(entropy) == 1 else tuple(entropy)
        self._entropy = [int(p) for p in entropy]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self._entropy)))
        self.draws = 0

    def random(self) -> float:
        """Uniform draw in [0, 1)."""
        self.draws += 1
        return float(self._gen.random())

    def bernoulli(self, prob: float) -> bool:
        # r in (0, 1] so that prob == 1 always passes and prob == 0 never does
        r = 1.0 - self.random()
        return r <= prob

    def categorical(self, probs: np.ndarray) -> int:
        """Inverse-CDF sample; never returns an index with zero mass."""
        cdf = np.asarray(probs, dtype=np.float64).cumsum()
        u = self.random() * cdf[-1]
        idx = int(cdf.searchsorted(u, side="right"))
        if idx >= len(probs) or probs[idx] <= 0.0:
            idx = int(np.flatnonzero(probs > 0.0)[-1])
        return idx

    def spawn(self, *key: int) -> "SeededRng":
        """Independent child stream keyed by integers (deterministic)."""
        return SeededRng([*self._entropy, *key])


def session_rng(run_seed: int, tag: int, role: str) -> SeededRng:
    """Stream for one session role, derived from ``(run_seed, tag)``.

    The draft server and the target client each derive their own stream from
    the same pair, so a distributed run consumes exactly the draws a
    single-process run with the same pair would.
    """
    if role not in _ROLES:
        raise ValueError(f"unknown rng role {role!r}")
    return SeededRng([int(run_seed), int(tag), _ROLES[role]])
