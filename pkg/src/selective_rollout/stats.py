"""Rank statistics and percentile bootstrap used by the correlation tables."""
from __future__ import annotations

import itertools
import math
import statistics
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import rankdata
from scipy.stats import t as student_t

from .core import SIGNAL_NAMES, GroupRecord


class SingleClassError(ValueError):
    """AUROC needs at least one positive and one negative example."""


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Spearman's rho (Pearson on average ranks) and its two-sided t-test p-value.

    Constant input has no defined correlation; both values come back as NaN.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d and of equal length")
    n = x.size
    if n < 3:
        raise ValueError("need at least 3 observations")
    rx = rankdata(x) - (n + 1) / 2.0
    ry = rankdata(y) - (n + 1) / 2.0
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0.0:
        return float("nan"), float("nan")
    rho = float(rx @ ry) / den
    rho = max(-1.0, min(1.0, rho))
    if abs(rho) == 1.0:
        return rho, 0.0
    tstat = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = 2.0 * float(student_t.sf(abs(tstat), n - 2))
    return rho, p


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(score of a random positive > score of a random negative), ties count 1/2."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pos = y == 1
    n1 = int(pos.sum())
    n0 = int((y == 0).sum())
    if n1 + n0 != y.size:
        raise ValueError("labels must be 0/1")
    if n1 == 0 or n0 == 0:
        raise SingleClassError("AUROC undefined for single-class input")
    r = rankdata(s)
    u = float(r[pos].sum()) - n1 * (n1 + 1) / 2.0
    return u / (n1 * n0)


@dataclass(frozen=True)
class BootstrapResult:
    point_estimate: float
    ci_low: float
    ci_high: float
    B: int
    level: float
    seed: int | None
    exhaustive: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _order_stat(sorted_vals: np.ndarray, q: float) -> float:
    # smallest value whose empirical CDF reaches q
    idx = max(0, math.ceil(q * len(sorted_vals) - 1e-12) - 1)
    return float(sorted_vals[min(idx, len(sorted_vals) - 1)])


def bootstrap_ci(
    values: Sequence[float] | np.ndarray,
    statistic: Callable[[np.ndarray], float] = np.mean,
    B: int = 1000,
    level: float = 0.95,
    seed: int | None = 0,
) -> BootstrapResult:
    """Percentile bootstrap interval for ``statistic`` over ``values``.

    ``values`` may be 2-d (one row per resampling unit). When ``B`` covers all
    ``n**n`` ordered resamples, they are enumerated instead of drawn, which
    gives the exact bootstrap distribution.
    """
    data = np.asarray(values, dtype=float)
    n = len(data)
    if n == 0:
        raise ValueError("no data to bootstrap")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    point = float(statistic(data))
    exhaustive = n ** n <= B
    if exhaustive:
        idx_iter: Iterable = itertools.product(range(n), repeat=n)
        stats = np.array([statistic(data[list(ix)]) for ix in idx_iter], dtype=float)
    else:
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, n, size=(B, n))
        stats = np.array([statistic(data[row]) for row in idx], dtype=float)
    stats.sort()
    alpha = 1.0 - level
    lo = _order_stat(stats, alpha / 2.0)
    hi = _order_stat(stats, 1.0 - alpha / 2.0)
    return BootstrapResult(point, lo, hi, len(stats), level, seed, exhaustive)


# Corpus tables ---------------------------------------------------------------


@dataclass(frozen=True)
class CorrelationCell:
    metric: str
    K: int
    spearman_rho: float
    p_value: float
    auroc: float
    n: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def reward_variance(group: GroupRecord) -> float:
    return float(np.var(np.asarray(group.rewards, dtype=float)))


def _targets(corpus: Sequence[GroupRecord]) -> tuple[list[float], list[int]]:
    var = [reward_variance(g) for g in corpus]
    nonzero = [0 if g.zero_variance else 1 for g in corpus]
    return var, nonzero


def _safe_auroc(scores: Sequence[float], labels: Sequence[int], flip: bool) -> float:
    try:
        a = auroc(scores, labels)
    except SingleClassError:
        return float("nan")
    return 1.0 - a if flip else a


def heatmap(
    corpus: Sequence[GroupRecord],
    metrics: Sequence[str] = SIGNAL_NAMES,
    k_grid: Sequence[int] = (5, 10, 15, 20),
    flip: bool = False,
) -> list[CorrelationCell]:
    """Spearman against reward variance and AUROC for the non-zero-variance class.

    Each signal is the classifier score as-is (higher means more divergent,
    hence more likely non-zero-variance); ``flip`` scores the zero-variance
    class instead.
    """
    var, nonzero = _targets(corpus)
    cells = []
    for m in metrics:
        for k in k_grid:
            vals = [g.divergence[k].get(m) for g in corpus]
            rho, p = spearman_rho(vals, var)
            cells.append(CorrelationCell(m, k, rho, p, _safe_auroc(vals, nonzero, flip), len(vals)))
    return cells


@dataclass(frozen=True)
class TypeRow:
    task_type: str
    n: int
    n_zv: int
    global_auroc: float | None
    best_metric: str | None
    best_K: int | None
    best_auroc: float | None
    single_observation: bool
    note: str = ""

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def per_type_breakdown(
    corpus: Sequence[GroupRecord],
    K: int = 10,
    metrics: Sequence[str] = SIGNAL_NAMES,
    k_grid: Sequence[int] = (5, 10, 15, 20),
) -> tuple[list[TypeRow], float | None, float | None]:
    """Per-task-type AUROC of global ``d_K`` plus the best (metric, K) per type.

    Returns the rows and the medians of the global and best AUROC columns over
    the types that could be scored.
    """
    by_type: dict[str, list[GroupRecord]] = {}
    for g in corpus:
        by_type.setdefault(g.task_type, []).append(g)
    rows = []
    for task, groups in by_type.items():
        _, nonzero = _targets(groups)
        n_zv = nonzero.count(0)
        if n_zv == 0 or n_zv == len(groups):
            rows.append(TypeRow(task, len(groups), n_zv, None, None, None, None, False,
                                note="single class; skipped"))
            continue
        glob = auroc([g.divergence[K].d_K for g in groups], nonzero)
        best = (-1.0, "", 0)
        for m in metrics:
            for k in k_grid:
                a = auroc([g.divergence[k].get(m) for g in groups], nonzero)
                if a > best[0]:
                    best = (a, m, k)
        rows.append(TypeRow(task, len(groups), n_zv, glob, best[1], best[2], best[0],
                            single_observation=n_zv <= 2))
    scored = [r for r in rows if r.global_auroc is not None]
    med_glob = statistics.median(r.global_auroc for r in scored) if scored else None
    med_best = statistics.median(r.best_auroc for r in scored) if scored else None
    return rows, med_glob, med_best
