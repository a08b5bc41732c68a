"""Reasoning-path generation and retrieval.

A path is built one token per step: every still-active codebook proposes its
best token, the proposal with the highest confidence wins, and its codebook
leaves the active set, so a complete path holds exactly one token per
codebook in a model-chosen order. Generation can interleave a reflection
check that compares consecutive step category distributions and rolls the
path back when they diverge too far. Completed paths retrieve items from an
exact-L2 index over the catalog's mixed codeword vectors.

Any model exposing ``n_codebooks``, ``start_decode(seq)``,
``step_scores(state)`` and ``advance(state, r, c)`` can drive generation;
tests use scripted stand-ins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .numerics import js_divergence, softmax
from .tokenizer import TokenSet

ALIVE = "alive"
COMPLETE = "complete"
PRUNED = "pruned"


@dataclass(frozen=True)
class PathStep:
    codebook: int
    token: int
    confidence: float
    category_dist: np.ndarray | None = None


@dataclass(frozen=True)
class ReasoningPath:
    steps: tuple[PathStep, ...]
    active: frozenset[int]
    status: str = ALIVE

    def __post_init__(self):
        if self.status not in (ALIVE, COMPLETE, PRUNED):
            raise ValueError(f"unknown path status {self.status!r}")
        seen = [s.codebook for s in self.steps]
        if len(set(seen)) != len(seen) or set(seen) & self.active:
            raise ValueError("a codebook may appear at most once per path")
        for s in self.steps:
            if not (0.0 < s.confidence <= 1.0):
                raise ValueError("step confidence must lie in (0, 1]")

    @property
    def n_codebooks(self) -> int:
        return len(self.steps) + len(self.active)

    @property
    def complete(self) -> bool:
        return self.status == COMPLETE

    def token_set(self) -> TokenSet:
        if not self.complete:
            raise ValueError("incomplete-path")
        return TokenSet((s.codebook, s.token) for s in self.steps)


def new_path(n_codebooks: int) -> ReasoningPath:
    return ReasoningPath((), frozenset(range(1, n_codebooks + 1)))


def _propose(logits: np.ndarray, mode: str, stream) -> tuple[int, float] | None:
    """Best (token, confidence) for one codebook; None if logits unusable."""
    if not np.all(np.isfinite(logits)):
        return None
    probs = softmax(logits)
    if mode == "greedy":
        token = int(np.argmax(probs))  # ties resolve to the lowest index
    else:
        cum = np.cumsum(probs)
        token = int(np.searchsorted(cum, stream.random() * cum[-1], side="right"))
        token = min(token, probs.size - 1)
        if probs[token] <= 0.0:  # boundary hit on an underflowed bucket
            token = int(np.argmax(probs))
    return token + 1, float(probs[token])


def advance_path(model, state, path: ReasoningPath, mode: str = "greedy",
                 stream=None) -> tuple[object, ReasoningPath]:
    """One selection step: pick the most confident token across active codebooks.

    Confidence is the token's softmax probability under its codebook head.
    Ties break toward the lower codebook index (token ties toward the lower
    token index). The winning codebook leaves the active set.
    """
    if path.status != ALIVE or not path.active:
        raise ValueError("path is not alive")
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "sample" and stream is None:
        raise ValueError("sample mode requires an rng stream")
    logits_all, cate = model.step_scores(state)
    best = None  # (codebook, token, confidence)
    for r in sorted(path.active):
        proposal = _propose(np.asarray(logits_all[r - 1], dtype=np.float64), mode, stream)
        if proposal is None:
            continue
        token, conf = proposal
        if best is None or conf > best[2]:
            best = (r, token, conf)
    if best is None:
        raise ValueError("decode-failure: no active codebook produced finite logits")
    r, token, conf = best
    step = PathStep(r, token, conf, np.asarray(cate, dtype=np.float64))
    active = path.active - {r}
    new = ReasoningPath(path.steps + (step,), active,
                        COMPLETE if not active else ALIVE)
    return model.advance(state, r, token), new


def generate_path(seq, model, mode: str = "greedy", stream=None) -> ReasoningPath:
    """Run selection until every codebook is used; exactly M steps."""
    state = model.start_decode(seq)
    path = new_path(model.n_codebooks)
    while path.status == ALIVE:
        state, path = advance_path(model, state, path, mode, stream)
    return path


@dataclass(frozen=True)
class ReflectionDecision:
    rollback: bool
    to_step: int | None      # number of leading steps kept when rolling back
    divergence: float


def reflection_check(path: ReasoningPath, threshold: float, stride: int = 1
                     ) -> ReflectionDecision:
    """Compare the newest step's category distribution with the one ``stride``
    steps earlier; above-threshold divergence asks for a rollback to one step
    before the earlier member of the pair."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if len(path.steps) < stride + 1:
        raise ValueError(f"need at least {stride + 1} steps to check")
    j = len(path.steps) - 1
    i = j - stride
    for k in (i, j):
        if path.steps[k].category_dist is None:
            raise ValueError("invalid-distribution: step has no category distribution")
    div = js_divergence(path.steps[i].category_dist, path.steps[j].category_dist)
    if div > threshold:
        # retain steps[:i]: the path stands one step before the pair's
        # earlier member, so both members regenerate
        return ReflectionDecision(True, i, div)
    return ReflectionDecision(False, None, div)


def generate_with_reflection(seq, model, threshold: float, stride: int = 1,
                             retry_budget: int = 2, stream=None,
                             mode: str = "greedy") -> ReasoningPath:
    """Generate with consistency checks after every step.

    On violation the path rolls back and the suffix is resampled under a
    fresh substream (even in greedy mode, otherwise the rollback would
    reproduce itself). After ``retry_budget`` rollbacks the offending path
    is returned with pruned status.
    """
    if retry_budget < 0:
        raise ValueError("retry_budget must be nonnegative")
    if stream is None and retry_budget > 0 and not math.isinf(threshold):
        raise ValueError("reflection retries require an rng stream")
    base_state = model.start_decode(seq)
    state, path = base_state, new_path(model.n_codebooks)
    retries = 0
    cur_mode, cur_stream = mode, stream
    while path.status == ALIVE:
        state, path = advance_path(model, state, path, cur_mode, cur_stream)
        if math.isinf(threshold) or len(path.steps) < stride + 1:
            continue
        decision = reflection_check(path, threshold, stride)
        if not decision.rollback:
            continue
        if retries >= retry_budget:
            return replace(path, status=PRUNED)
        retries += 1
        kept = path.steps[:decision.to_step]
        state = base_state
        for s in kept:
            state = model.advance(state, s.codebook, s.token)
        path = ReasoningPath(kept, frozenset(range(1, model.n_codebooks + 1))
                             - {s.codebook for s in kept})
        cur_mode = "sample"
        cur_stream = stream.spawn(1)[0]
    return path


class RetrievalIndex:
    """Exact L2 nearest-neighbour index over per-item mixed codeword vectors."""

    def __init__(self, codebooks: Sequence[np.ndarray], vectors: dict[str, np.ndarray]):
        if not vectors:
            raise ValueError("empty-catalog")
        self.codebooks = [np.asarray(cb, dtype=np.float64) for cb in codebooks]
        self.item_ids = sorted(vectors)
        self.matrix = np.stack([np.asarray(vectors[i], dtype=np.float64)
                                for i in self.item_ids])

    @classmethod
    def from_token_map(cls, codebooks: Sequence[np.ndarray],
                       token_map: dict[str, tuple[TokenSet, np.ndarray]]) -> "RetrievalIndex":
        """Index vectors are the gate-weighted sums of each item's codewords."""
        vectors = {}
        for item_id, (tokens, gates) in token_map.items():
            parts = np.stack([codebooks[r - 1][c - 1] for r, c in tokens.tokens])
            vectors[item_id] = np.einsum("r,rl->l", np.asarray(gates, dtype=np.float64), parts)
        return cls(codebooks, vectors)

    def __len__(self) -> int:
        return len(self.item_ids)

    def __contains__(self, item_id: str) -> bool:
        return item_id in set(self.item_ids)

    def query_vector(self, steps: Sequence[PathStep]) -> np.ndarray:
        """Uniformly weighted mean of the steps' codewords (no query-side gate)."""
        if not steps:
            raise ValueError("cannot build a query from zero steps")
        parts = np.stack([self.codebooks[s.codebook - 1][s.token - 1] for s in steps])
        return parts.mean(axis=0)

    def topn_by_vector(self, query: np.ndarray, n: int) -> list[str]:
        d2 = ((self.matrix - np.asarray(query, dtype=np.float64)) ** 2).sum(axis=1)
        # item_ids are sorted, so a stable sort breaks distance ties by id
        order = np.argsort(d2, kind="stable")[:n]
        return [self.item_ids[i] for i in order]


def retrieve_topn(path: ReasoningPath, index: RetrievalIndex, n: int,
                  drop: int = 0) -> list[str]:
    """Top-n catalog items for a completed path.

    ``drop`` lowest-confidence steps are excluded from the query (ties drop
    the later step); ranking is ascending L2 distance, ties by item id.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not (0 <= drop < path.n_codebooks):
        raise ValueError("drop must satisfy 0 <= d < M")
    if not path.complete:
        raise ValueError("incomplete-path" if path.status == ALIVE else "pruned-path")
    retained = retained_steps_by_confidence(path.steps, drop)
    return index.topn_by_vector(index.query_vector(retained), n)


def retained_steps_by_confidence(steps: Sequence[PathStep], drop: int) -> list[PathStep]:
    if drop == 0:
        return list(steps)
    order = sorted(range(len(steps)),
                   key=lambda i: (steps[i].confidence, -i))  # ties drop later steps
    dropped = set(order[:drop])
    return [s for i, s in enumerate(steps) if i not in dropped]
