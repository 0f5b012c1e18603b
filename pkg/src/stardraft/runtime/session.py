"""Tag-indexed draft-side session state."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Iterable

from ..core import CategoricalModel
from ..core.rng import SeededRng


class UnknownTag(KeyError):
    pass


@dataclass
class SessionState:
    tag: int
    prefix: list[int] = field(default_factory=list)
    cursor: tuple[int, ...] = ()  # draft context window, kept in step with prefix
    meta: bytes = b""  # opaque per-session slot, never interpreted
    rng: SeededRng | None = None
    created_at: float = 0.0
    last_active: float = 0.0
    last_seq: int = -1


class SessionStore:
    """Sessions keyed by tag; tags count up from 1 and are never reused.

    Only the inference loop touches the states, so there is no locking here;
    tag allocation happens on the acceptor side and uses its own counter.
    """

    def __init__(self, draft: CategoricalModel, clock=time.monotonic) -> None:
        self.draft = draft
        self.clock = clock
        self._states: dict[int, SessionState] = {}
        self._released: set[int] = set()
        self._tags = itertools.count(1)

    def next_tag(self) -> int:
        return next(self._tags)

    def init(self, tag: int, rng: SeededRng | None = None) -> SessionState:
        if tag in self._states or tag in self._released:
            raise ValueError(f"tag {tag} already used")
        now = self.clock()
        state = SessionState(tag, cursor=self.draft.context([]), rng=rng, created_at=now, last_active=now)
        self._states[tag] = state
        return state

    def lookup(self, tag: int) -> SessionState:
        try:
            return self._states[tag]
        except KeyError:
            raise UnknownTag(tag) from None

    def update(self, tag: int, new_tokens: Iterable[int]) -> SessionState:
        state = self.lookup(tag)
        new = [int(t) for t in new_tokens]
        state.prefix.extend(new)
        m = self.draft.order
        if m and new:
            state.cursor = (state.cursor + tuple(new))[-m:]
        state.last_active = self.clock()
        return state

    def release(self, tag: int) -> None:
        if self._states.pop(tag, None) is None:
            raise UnknownTag(tag)
        self._released.add(tag)

    def live_tags(self) -> list[int]:
        return sorted(self._states)

    def __contains__(self, tag: int) -> bool:
        return tag in self._states

    def __len__(self) -> int:
        return len(self._states)
