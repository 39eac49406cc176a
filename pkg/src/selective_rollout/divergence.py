"""In-group divergence signals over partial trajectories.

Every signal compares the ``G`` trajectories of one group as they stand after
``K`` environment steps. Edit distances are taken over action symbols, one
environment action per token.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import replace
from itertools import combinations
from typing import Hashable, Iterable, Sequence

from .core import DivergenceVector, GroupRecord, TrajectoryRecord

DEFAULT_K_GRID = (5, 10, 15, 20)


def levenshtein(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    """Minimum number of single-token insertions, deletions and substitutions."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def normalized_edit_distance(a: Sequence[Hashable], b: Sequence[Hashable]) -> float:
    longest = max(len(a), len(b))
    if longest == 0:
        # two empty prefixes are identical
        return 0.0
    return levenshtein(a, b) / longest


def prefix_edit_distance_mean(prefixes: Sequence[Sequence[Hashable]]) -> float:
    """Mean length-normalised edit distance over all pairs of prefixes (``d_K``)."""
    if len(prefixes) < 2:
        raise ValueError("need at least two prefixes")
    pairs = list(combinations(prefixes, 2))
    return sum(normalized_edit_distance(p, q) for p, q in pairs) / len(pairs)


def _bigrams(seq: Sequence[Hashable]) -> set:
    return {(seq[i], seq[i + 1]) for i in range(len(seq) - 1)}


def bigram_jaccard_distance(prefixes: Sequence[Sequence[Hashable]]) -> float:
    sets = [_bigrams(p) for p in prefixes]
    total = 0.0
    n = 0
    for x, y in combinations(sets, 2):
        union = x | y
        total += 0.0 if not union else 1.0 - len(x & y) / len(union)
        n += 1
    return total / n


def _symbol_at(symbols: Sequence[Hashable], k: int) -> Hashable | None:
    # early-terminated trajectories keep reporting their last symbol
    upto = min(k, len(symbols))
    return symbols[upto - 1] if upto > 0 else None


def _unique_ratio(items: Iterable[Hashable], g: int) -> float:
    return len(set(items)) / g


def _normalized_entropy(items: Sequence[Hashable]) -> float:
    g = len(items)
    counts = Counter(items).values()
    h = -sum((c / g) * math.log(c / g) for c in counts)
    return max(0.0, min(1.0, h / math.log(g)))


def termination_fraction(trajectories: Sequence[TrajectoryRecord], k: int) -> float:
    done = sum(1 for t in trajectories if t.terminated_at is not None and t.terminated_at <= k)
    return done / len(trajectories)


def auxiliary_signals(group: GroupRecord, k: int) -> dict[str, float]:
    """The six signals that accompany ``d_K``."""
    if k > group.T_max:
        raise ValueError(f"K={k} exceeds T_max={group.T_max}")
    g = group.G
    prefixes = group.prefixes(k)
    step_actions = [_symbol_at(t.actions, k) for t in group.trajectories]
    step_obs = [_symbol_at(t.observations, k) for t in group.trajectories]
    return {
        "action_bigram_jaccard_mean": bigram_jaccard_distance(prefixes),
        "unique_prefix_ratio": _unique_ratio(prefixes, g),
        "unique_action_ratio": _unique_ratio(step_actions, g),
        "action_entropy": _normalized_entropy(step_actions),
        "obs_unique_ratio": _unique_ratio(step_obs, g),
        "termination_fraction": termination_fraction(group.trajectories, k),
    }


def divergence_vector(group: GroupRecord, k: int) -> DivergenceVector:
    return DivergenceVector(
        K=k,
        prefix_edit_distance_mean=prefix_edit_distance_mean(group.prefixes(k)),
        **auxiliary_signals(group, k),
    )


def with_signals(group: GroupRecord, k_grid: Iterable[int] = DEFAULT_K_GRID) -> GroupRecord:
    div = dict(group.divergence)
    for k in k_grid:
        div[k] = divergence_vector(group, k)
    return replace(group, divergence=div)


def annotate_corpus(corpus: Iterable[GroupRecord], k_grid: Iterable[int] = DEFAULT_K_GRID) -> list[GroupRecord]:
    ks = tuple(k_grid)
    return [with_signals(g, ks) for g in corpus]
