from __future__ import annotations

import math
from functools import lru_cache

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selective_rollout.divergence import (
    auxiliary_signals,
    bigram_jaccard_distance,
    divergence_vector,
    levenshtein,
    normalized_edit_distance,
    prefix_edit_distance_mean,
    termination_fraction,
    with_signals,
)

from conftest import group, traj


def oracle_levenshtein(a, b):
    """Memoised recursion over suffixes, independent of the two-row table."""
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        return min(d(i + 1, j) + 1, d(i, j + 1) + 1, d(i + 1, j + 1) + (a[i] != b[j]))

    return d(0, 0)


seqs = st.lists(st.integers(0, 4), max_size=12)


@pytest.mark.parametrize("a,b,dist", [
    ("kitten", "sitting", 3), ("", "abc", 3), ("abc", "abc", 0), ("flaw", "lawn", 2),
])
def test_levenshtein_known(a, b, dist):
    assert levenshtein(a, b) == dist


@given(seqs, seqs)
@settings(max_examples=300)
def test_levenshtein_matches_oracle(a, b):
    assert levenshtein(a, b) == oracle_levenshtein(a, b)


@given(seqs, seqs, seqs)
@settings(max_examples=200)
def test_levenshtein_metric(a, b, c):
    assert levenshtein(a, b) == levenshtein(b, a)
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)
    assert (levenshtein(a, b) == 0) == (a == b)


@given(seqs, seqs)
def test_normalized_in_unit_interval(a, b):
    v = normalized_edit_distance(a, b)
    assert 0.0 <= v <= 1.0


def test_identical_prefixes_give_zero():
    assert prefix_edit_distance_mean([("a", "b")] * 8) == 0.0
    assert prefix_edit_distance_mean([(), ()]) == 0.0


def test_pair_mean_by_hand():
    # pairs: (ab,ab)=0, (ab,cd)=1, (ab,cd)=1 -> mean 2/3
    assert prefix_edit_distance_mean([("a", "b"), ("a", "b"), ("c", "d")]) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        prefix_edit_distance_mean([("a",)])


def test_bigram_jaccard():
    assert bigram_jaccard_distance([("a", "b", "c")] * 3) == 0.0
    assert bigram_jaccard_distance([("a", "b"), ("c", "d")]) == 1.0
    # {ab,bc} vs {ab,bd}: 1 - 1/3
    assert bigram_jaccard_distance([("a", "b", "c"), ("a", "b", "d")]) == pytest.approx(2 / 3)
    assert bigram_jaccard_distance([("a",), ("b",)]) == 0.0


def test_auxiliary_signals_by_hand():
    g = group([["a", "b", "c"], ["a", "b", "c"], ["a", "x"], ["y"]], [1, 1, 0, 0])
    s = auxiliary_signals(g, 3)
    assert s["unique_prefix_ratio"] == pytest.approx(3 / 4)
    # symbols at step 3: c, c, x (last emitted), y (last emitted)
    assert s["unique_action_ratio"] == pytest.approx(3 / 4)
    h = -(0.5 * math.log(0.5) + 2 * 0.25 * math.log(0.25)) / math.log(4)
    assert s["action_entropy"] == pytest.approx(h)
    assert s["termination_fraction"] == pytest.approx(1.0)
    assert auxiliary_signals(g, 1)["termination_fraction"] == pytest.approx(1 / 4)


def test_entropy_extremes():
    same = group([["a"]] * 4, [0] * 4)
    assert auxiliary_signals(same, 1)["action_entropy"] == 0.0
    diff = group([["a"], ["b"], ["c"], ["d"]], [0] * 4)
    assert auxiliary_signals(diff, 1)["action_entropy"] == pytest.approx(1.0)


def test_termination_counts_only_finished():
    ts = [traj(["a"], 0), traj(["a", "b"], 0, done=False)]
    assert termination_fraction(ts, 1) == 0.5
    assert termination_fraction(ts, 5) == 0.5


def test_vector_and_annotation():
    g = group([["a", "b"], ["a", "c"]], [1, 0])
    v = divergence_vector(g, 2)
    assert v.d_K == pytest.approx(0.5) and v.K == 2
    g2 = with_signals(g, (1, 2))
    assert set(g2.divergence) == {1, 2} and g.divergence == {}
    with pytest.raises(ValueError):
        auxiliary_signals(g, 31)
