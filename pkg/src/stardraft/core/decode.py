"""Single-process decoders: speculative (draft tree + verify) and plain."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .models import CategoricalModel
from .rng import SeededRng
from .tree import build_draft_tree
from .verify import AcceptOutcome, verify_tree


@dataclass
class DecodeResult:
    tokens: list[int]  # prompt + generated
    prompt_len: int
    accept_lengths: list[int] = field(default_factory=list)

    @property
    def generated(self) -> list[int]:
        return self.tokens[self.prompt_len :]

    @property
    def rounds(self) -> int:
        return len(self.accept_lengths)


def append_continuation(
    generated: list[int],
    continuation: Sequence[int],
    max_tokens: int,
    eos: int | None,
) -> bool:
    """Append in place, stopping at ``max_tokens`` or after ``eos``; return done."""
    for tok in continuation:
        if len(generated) >= max_tokens:
            return True
        generated.append(int(tok))
        if eos is not None and tok == eos:
            return True
    return len(generated) >= max_tokens


class DecodeSession:
    """Evolving verified prefix of one request plus its two random streams.

    The draft stream feeds tree construction (the draft side's share of
    randomness) and the target stream feeds verification, so the same pair
    of streams reproduces a run whether both halves live in one process or
    on two machines.
    """

    def __init__(
        self,
        target: CategoricalModel,
        draft: CategoricalModel,
        prompt: Sequence[int],
        d: int,
        k: int,
        max_tokens: int,
        target_rng: SeededRng,
        draft_rng: SeededRng | None = None,
        greedy: bool = False,
    ) -> None:
        if max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        for t in prompt:
            if not 0 <= t < target.vocab_size:
                raise ValueError(f"prompt token {t} outside vocabulary")
        self.target = target.as_greedy() if greedy else target
        self.draft = draft
        self.prompt = [int(t) for t in prompt]
        self.d, self.k = d, k
        self.max_tokens = max_tokens
        self.target_rng = target_rng
        self.draft_rng = draft_rng if draft_rng is not None else target_rng
        self.generated: list[int] = []
        self.accept_lengths: list[int] = []
        self.done = False
        self._span = max(self.target.order, draft.order)

    @property
    def prefix(self) -> list[int]:
        return self.prompt + self.generated

    def window(self) -> list[int]:
        """Tail of the prefix that both models' contexts can see."""
        if len(self.generated) >= self._span:
            return self.generated[len(self.generated) - self._span :]
        return (self.prompt + self.generated)[-self._span :] if self._span else []

    def apply(self, outcome: AcceptOutcome) -> list[int]:
        """Fold one verification outcome in; return the tokens appended."""
        before = len(self.generated)
        self.accept_lengths.append(outcome.accept_length)
        self.done = append_continuation(
            self.generated, outcome.continuation, self.max_tokens, self.target.eos
        )
        return self.generated[before:]

    def verify(self, tree) -> AcceptOutcome:
        return verify_tree(self.target, self.draft, self.window(), tree, self.target_rng)

    def step(self) -> AcceptOutcome:
        tree = build_draft_tree(self.draft, self.window(), self.d, self.k, self.draft_rng)
        outcome = self.verify(tree)
        self.apply(outcome)
        return outcome

    def result(self) -> DecodeResult:
        return DecodeResult(self.prefix, len(self.prompt), list(self.accept_lengths))


def speculative_decode(
    target: CategoricalModel,
    draft: CategoricalModel,
    prompt: Sequence[int],
    d: int,
    k: int,
    max_tokens: int,
    rng: SeededRng,
    draft_rng: SeededRng | None = None,
    greedy: bool = False,
) -> DecodeResult:
    """Draft-tree/verify loop until ``eos`` or ``max_tokens`` new tokens.

    Each round contributes its accepted tokens plus exactly one more (the
    correction, or a bonus token when the whole path is accepted).
    """
    session = DecodeSession(target, draft, prompt, d, k, max_tokens, rng, draft_rng, greedy)
    while not session.done:
        session.step()
    return session.result()


def autoregressive_decode(
    target: CategoricalModel,
    prompt: Sequence[int],
    max_tokens: int,
    rng: SeededRng,
    greedy: bool = False,
) -> DecodeResult:
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    model = target.as_greedy() if greedy else target
    seq = [int(t) for t in prompt]
    start = len(seq)
    generated: list[int] = []
    done = False
    while not done:
        tok = rng.categorical(model.next_dist(seq))
        done = append_continuation(generated, (tok,), max_tokens, model.eos)
        seq.extend(generated[len(seq) - start :])
    return DecodeResult(seq, start)
