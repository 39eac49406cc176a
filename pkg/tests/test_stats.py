from __future__ import annotations

import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from selective_rollout.core import SIGNAL_NAMES, DivergenceVector
from selective_rollout.stats import (
    SingleClassError,
    auroc,
    bootstrap_ci,
    heatmap,
    per_type_breakdown,
    spearman_rho,
)

from conftest import group


def pair_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_spearman_examples():
    assert spearman_rho([1, 2, 3, 4], [10, 20, 30, 40])[0] == 1.0
    assert spearman_rho([1, 2, 3, 4], [4, 3, 2, 1])[0] == -1.0
    assert spearman_rho([1, 2, 3, 4], [1, 3, 2, 4])[0] == pytest.approx(0.8)
    rho, p = spearman_rho([1, 1, 1], [1, 2, 3])
    assert np.isnan(rho) and np.isnan(p)
    with pytest.raises(ValueError):
        spearman_rho([1, 2], [1, 2])


def test_spearman_p_value_against_scipy():
    from scipy.stats import spearmanr
    rng = np.random.default_rng(0)
    x = rng.normal(size=50)
    y = x + rng.normal(size=50)
    rho, p = spearman_rho(x, y)
    ref = spearmanr(x, y)
    assert rho == pytest.approx(ref.statistic, abs=1e-12)
    assert p == pytest.approx(ref.pvalue, rel=1e-9)


def test_auroc_examples():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.5] * 4, [0, 1, 0, 1]) == 0.5
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    with pytest.raises(SingleClassError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [0, 2])


fixtures = st.integers(2, 12).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 4), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
)).filter(lambda t: 0 < sum(t[1]) < len(t[1]))


@given(fixtures)
@settings(max_examples=200)
def test_auroc_matches_pairs_and_complements(fx):
    s, y = fx
    assert auroc(s, y) == pair_auroc(s, y)
    assert auroc(s, y) + auroc([-v for v in s], y) == 1.0


@given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=20),
       st.lists(st.integers(0, 1), min_size=20, max_size=20))
def test_rank_invariance(x, labels):
    y = list(range(len(x)))[::-1]
    fx = [3 * v ** 3 + 7 for v in x]
    assert spearman_rho(fx, y)[0] == pytest.approx(spearman_rho(x, y)[0], nan_ok=True)
    lab = labels[: len(x)]
    if 0 < sum(lab) < len(lab):
        assert auroc(fx, lab) == auroc(x, lab)


def test_bootstrap_exhaustive_oracle():
    data = np.array([1.0, 4.0, 10.0])
    res = bootstrap_ci(data, B=27, level=0.9, seed=0)
    stats = [data[list(ix)].mean() for ix in itertools.product(range(3), repeat=3)]
    assert res.exhaustive and res.B == 27
    assert res.ci_low == np.quantile(stats, 0.05, method="inverted_cdf")
    assert res.ci_high == np.quantile(stats, 0.95, method="inverted_cdf")
    assert res.ci_low in stats and res.ci_high in stats


def test_bootstrap_basic():
    assert bootstrap_ci([3.0] * 10, seed=1).ci_low == 3.0
    a = bootstrap_ci(np.arange(20.0), B=500, seed=4)
    assert a == bootstrap_ci(np.arange(20.0), B=500, seed=4)
    assert a.ci_low <= a.point_estimate <= a.ci_high and not a.exhaustive
    with pytest.raises(ValueError):
        bootstrap_ci([])


def dv(k, **vals):
    base = {n: 0.0 for n in SIGNAL_NAMES}
    base.update(vals)
    return DivergenceVector(k, **base)


def test_heatmap_u_shape_and_perfect_cell():
    corpus = []
    for i in range(12):
        kind = i % 3
        rewards = [[0] * 4, [1] * 4, [1, 0, 1, 0]][kind]
        tau = [0.0, 1.0, 0.5][kind]
        d = [0.05, 0.06, 0.6][kind]
        g = group([["a"]] * 4, rewards, prompt_id=f"p{i}")
        corpus.append(replace(g, divergence={5: dv(5, prefix_edit_distance_mean=d,
                                                   termination_fraction=tau)}))
    cells = heatmap(corpus, k_grid=(5,))
    assert len(cells) == len(SIGNAL_NAMES) and all(c.n == 12 for c in cells)
    by = {c.metric: c for c in cells}
    assert abs(by["termination_fraction"].spearman_rho) < 0.1
    assert by["prefix_edit_distance_mean"].auroc == 1.0
    flipped = {c.metric: c for c in heatmap(corpus, k_grid=(5,), flip=True)}
    assert flipped["prefix_edit_distance_mean"].auroc == 0.0


def test_per_type_breakdown():
    corpus = []
    for i in range(6):  # type A: separable, two zero-variance groups
        zvg = i < 2
        g = group([["a"]] * 2, [1, 1] if zvg else [1, 0], prompt_id=f"a{i}", task_type="A")
        corpus.append(replace(g, divergence={10: dv(10, prefix_edit_distance_mean=0.0 if zvg else 0.5)}))
    for i in range(4):  # type B: all mixed
        g = group([["a"]] * 2, [1, 0], prompt_id=f"b{i}", task_type="B")
        corpus.append(replace(g, divergence={10: dv(10)}))
    rows, med_g, med_b = per_type_breakdown(corpus, 10, k_grid=(10,))
    by = {r.task_type: r for r in rows}
    assert by["A"].global_auroc == 1.0 and by["A"].single_observation
    assert by["B"].global_auroc is None and "skipped" in by["B"].note
    assert med_g == 1.0 and med_b == 1.0


def test_median_row_recomputes(corpus100):
    rows, med, _ = per_type_breakdown(corpus100, 10)
    vals = sorted(r.global_auroc for r in rows if r.global_auroc is not None)
    assert med == pytest.approx(float(np.median(vals)))
