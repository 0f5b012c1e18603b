"""Depth-d, branching-k draft trees."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .models import START, CategoricalModel
from .rng import SeededRng

ROOT = -1  # parent marker for level-1 nodes


@dataclass(frozen=True)
class TreeNode:
    token: int
    parent: int  # node index, or ROOT
    level: int


@dataclass(frozen=True)
class DraftTree:
    depth: int
    branching: int
    nodes: tuple[TreeNode, ...]
    root_token: int | None = None

    def __post_init__(self) -> None:
        for i, node in enumerate(self.nodes):
            if node.parent == ROOT:
                if node.level != 1:
                    raise ValueError(f"node {i}: root children must be level 1")
            else:
                if not 0 <= node.parent < i:
                    raise ValueError(f"node {i}: parent {node.parent} must precede it")
                if self.nodes[node.parent].level != node.level - 1:
                    raise ValueError(f"node {i}: parent level mismatch")
            if not 1 <= node.level <= self.depth:
                raise ValueError(f"node {i}: level {node.level} outside 1..{self.depth}")
        fanout: dict[int, int] = {}
        for node in self.nodes:
            fanout[node.parent] = fanout.get(node.parent, 0) + 1
        if fanout and max(fanout.values()) > self.branching:
            raise ValueError("a node has more than k children")

    def children(self) -> dict[int, list[int]]:
        kids: dict[int, list[int]] = {ROOT: []}
        for i, node in enumerate(self.nodes):
            kids.setdefault(node.parent, []).append(i)
        return kids

    def paths(self) -> list[list[int]]:
        """Root-to-leaf node-index paths, depth-first in node-index order."""
        kids = self.children()
        out: list[list[int]] = []
        stack: list[tuple[int, list[int]]] = [(c, [c]) for c in reversed(kids[ROOT])]
        while stack:
            idx, path = stack.pop()
            below = kids.get(idx)
            if not below:
                out.append(path)
                continue
            for c in reversed(below):
                stack.append((c, path + [c]))
        return out

    def token_paths(self) -> list[list[int]]:
        return [[self.nodes[i].token for i in p] for p in self.paths()]


def top_k(probs: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest entries, ties to the lower id."""
    # stable sort on -p keeps ascending id order among equal probabilities
    order = np.argsort(-probs, kind="stable")
    return [int(t) for t in order[:k]]


def build_draft_tree(
    draft: CategoricalModel,
    prefix: Sequence[int],
    d: int,
    k: int,
    rng: SeededRng,
) -> DraftTree:
    """Expand a proposal tree layer by layer from ``prefix``.

    With ``k >= 2`` each frontier node gets the top-k tokens of the draft's
    next distribution. With ``k == 1`` the single child is sampled from that
    distribution, which is what makes chain-mode decoding lossless.
    Within a level, nodes are ordered parent-major, then by descending
    probability.
    """
    if d < 1:
        raise ValueError("depth must be >= 1")
    if not 1 <= k <= draft.vocab_size:
        raise ValueError(f"branching must be in 1..{draft.vocab_size}")
    prefix = list(prefix)
    nodes: list[TreeNode] = []
    # frontier entries: (node index, token path from the root)
    frontier: list[tuple[int, list[int]]] = [(ROOT, [])]
    for level in range(1, d + 1):
        nxt = []
        for parent, path in frontier:
            q = draft.next_dist(prefix + path)
            picks = [rng.categorical(q)] if k == 1 else top_k(q, k)
            for tok in picks:
                nodes.append(TreeNode(tok, parent, level))
                nxt.append((len(nodes) - 1, path + [tok]))
        frontier = nxt
    root = prefix[-1] if prefix and prefix[-1] != START else None
    return DraftTree(d, k, tuple(nodes), root)
