"""Reward functions scoring reasoning paths against ground truth.

Four components, each in [0, 1]: the fraction of generated tokens inside the
target's unordered token set, the fraction of steps whose predicted category
matches the target's, one minus the mean Jensen-Shannon divergence between
consecutive step category distributions, and a retrieval indicator that
tolerates up to d wrong tokens. Multi-step variants score the path against
the next h items with exponentially decayed weights w^(j-1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .decoding import ReasoningPath, RetrievalIndex
from .numerics import js_divergence
from .tokenizer import TokenSet

LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class RewardTarget:
    item_id: str
    tokens: TokenSet
    category: int


@dataclass(frozen=True)
class FutureWindow:
    """The next h items treated as valid targets, decayed by w^(j-1)."""

    items: tuple[RewardTarget, ...]
    decay: float

    def __post_init__(self):
        if len(self.items) < 1:
            raise ValueError("empty-window")
        if not (0.0 < self.decay <= 1.0):
            raise ValueError("decay must lie in (0, 1]")

    @property
    def horizon(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class RewardConfig:
    top_n: int = 10
    drop_budget: int = 1
    horizon: int = 3
    decay: float = 0.8
    multi_step: bool = True
    normalize_consistency: bool = True
    enable_step: bool = True
    enable_category: bool = True
    enable_consistency: bool = True
    enable_path: bool = True


@dataclass(frozen=True)
class RewardBreakdown:
    step_hit: float
    category_hit: float
    consistency: float
    path_hit: float
    windowed_step_hit: float | None
    windowed_category_hit: float | None
    windowed_path_hit: float | None
    total: float


def _require_complete(path: ReasoningPath) -> None:
    if not path.complete:
        raise ValueError("incomplete-path")


def step_hit(path: ReasoningPath, target: TokenSet) -> float:
    """Fraction of path tokens inside the target's unordered token set.

    A token (r, c) hits iff the target's codebook-r token is c, so the score
    ignores generation order entirely.
    """
    _require_complete(path)
    m = path.n_codebooks
    hits = sum(1 for s in path.steps if target.codeword(s.codebook) == s.token)
    return hits / m


def category_hit(path: ReasoningPath, target_category: int) -> float:
    """Fraction of steps whose most likely category equals the target's."""
    _require_complete(path)
    hits = 0
    for s in path.steps:
        if s.category_dist is None:
            raise ValueError("no-category")
        hits += int(np.argmax(s.category_dist) == target_category)
    return hits / path.n_codebooks


def step_consistency(path: ReasoningPath, normalize: bool = True) -> float:
    """One minus the mean JS divergence over consecutive step pairs.

    Divergences are divided by ln 2 when ``normalize`` (the default) so the
    reward spans [0, 1]; raw mode keeps the unscaled mean.
    """
    _require_complete(path)
    m = path.n_codebooks
    if m < 2:
        raise ValueError("step consistency needs at least two steps")
    divs = []
    for a, b in zip(path.steps, path.steps[1:]):
        if a.category_dist is None or b.category_dist is None:
            raise ValueError("invalid-distribution")
        divs.append(js_divergence(a.category_dist, b.category_dist))
    mean_div = float(np.mean(divs))
    return 1.0 - (mean_div / LN2 if normalize else mean_div)


def _retained_for_target(path: ReasoningPath, target: TokenSet, drop: int):
    """Drop up to ``drop`` steps whose token mismatches the target.

    Lowest-confidence mismatches go first (ties drop the later step); correct
    tokens are never dropped.
    """
    steps = list(path.steps)
    wrong = [i for i, s in enumerate(steps) if target.codeword(s.codebook) != s.token]
    wrong.sort(key=lambda i: (steps[i].confidence, -i))
    dropped = set(wrong[:drop])
    return [s for i, s in enumerate(steps) if i not in dropped]


def global_path(path: ReasoningPath, target: RewardTarget, index: RetrievalIndex,
                top_n: int, drop: int) -> float:
    """1 iff the target item is retrieved from the tolerant path query."""
    _require_complete(path)
    if not (0 <= drop < path.n_codebooks):
        raise ValueError("drop must satisfy 0 <= d < M")
    retained = _retained_for_target(path, target.tokens, drop)
    ranked = index.topn_by_vector(index.query_vector(retained), top_n)
    return 1.0 if target.item_id in ranked else 0.0


def decayed_mean(values: Sequence[float], decay: float) -> float:
    """Weighted mean with weights decay^(j-1), normalized over the window."""
    weights = np.array([decay ** j for j in range(len(values))])
    return float(np.dot(weights, np.asarray(values, dtype=np.float64)) / weights.sum())


def windowed_step_hit(path: ReasoningPath, window: FutureWindow) -> float:
    return decayed_mean([step_hit(path, it.tokens) for it in window.items], window.decay)


def windowed_category_hit(path: ReasoningPath, window: FutureWindow) -> float:
    return decayed_mean([category_hit(path, it.category) for it in window.items],
                        window.decay)


def windowed_path_hit(path: ReasoningPath, window: FutureWindow,
                      index: RetrievalIndex, top_n: int, drop: int) -> float:
    """Decay-weighted retrieval indicators, one per window item."""
    hits = [global_path(path, it, index, top_n, drop) for it in window.items]
    return decayed_mean(hits, window.decay)


def total_reward(path: ReasoningPath, target: RewardTarget,
                 window: FutureWindow | None, index: RetrievalIndex,
                 config: RewardConfig) -> RewardBreakdown:
    """All enabled components; multi-step variants replace their single-step
    counterparts in the total when configured and a window is available."""
    use_window = config.multi_step and window is not None
    s = step_hit(path, target.tokens)
    c = category_hit(path, target.category)
    j = step_consistency(path, config.normalize_consistency)
    p = global_path(path, target, index, config.top_n, config.drop_budget)
    ws = wc = wp = None
    if use_window:
        ws = windowed_step_hit(path, window)
        wc = windowed_category_hit(path, window)
        wp = windowed_path_hit(path, window, index, config.top_n, config.drop_budget)
    total = 0.0
    if config.enable_step:
        total += ws if use_window else s
    if config.enable_category:
        total += wc if use_window else c
    if config.enable_consistency:
        total += j
    if config.enable_path:
        total += wp if use_window else p
    return RewardBreakdown(s, c, j, p, ws, wc, wp, total)
