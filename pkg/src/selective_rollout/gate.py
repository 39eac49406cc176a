"""Cut rules, threshold sweeps and the reference arms used to calibrate them.

All rules evaluate the divergence already recorded on a group at step ``K``.
Ties at a threshold keep the group: ``d_K < d_L`` is strict, while the
termination clauses use ``tau_K >= tau_H`` and ``tau_K <= t_L``.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Iterable, Sequence

import numpy as np

from .core import GateDecision, GroupRecord, RecordError
from .grpo import DEFAULT_EPSILON, advantages, l2_preservation

PRECISION_FLOOR = 0.80
DEFAULT_DL_GRID = (0.05, 0.08, 0.10, 0.12, 0.14, 0.18)
MIRROR_DL_GRID = tuple(round(0.02 * i, 2) for i in range(1, 16))  # 0.02 .. 0.30
MIRROR_TL_GRID = (0.0, 0.05, 0.10, 0.15)


def single_axis_gate(d_k: float, d_l: float) -> bool:
    return d_k < d_l


def or_rule_gate(d_k: float, tau_k: float, d_l: float, tau_h: float) -> tuple[bool, str]:
    if d_k < d_l:
        return True, "d"
    if tau_k >= tau_h:
        return True, "tau"
    return False, "none"


def low_tau_mirror_gate(d_k: float, tau_k: float, d_l: float, t_l: float) -> tuple[bool, str]:
    if d_k < d_l:
        return True, "d"
    if tau_k <= t_l:
        return True, "low_tau"
    return False, "none"


def decide(
    group: GroupRecord,
    k: int,
    d_l: float,
    tau_h: float | None = None,
    t_l: float | None = None,
) -> GateDecision:
    """Evaluate the configured rule on the divergence recorded at step ``k``."""
    if tau_h is not None and t_l is not None:
        raise ValueError("tau_h and t_l select different rules; pass at most one")
    try:
        dv = group.divergence[k]
    except KeyError:
        raise RecordError(f"group {group.prompt_id} has no divergence at K={k}") from None
    if tau_h is not None:
        cut, clause = or_rule_gate(dv.d_K, dv.tau_K, d_l, tau_h)
    elif t_l is not None:
        cut, clause = low_tau_mirror_gate(dv.d_K, dv.tau_K, d_l, t_l)
    else:
        cut = single_axis_gate(dv.d_K, d_l)
        clause = "d" if cut else "none"
    return GateDecision(cut=cut, clause=clause, K=k, d_K=dv.d_K, tau_K=dv.tau_K)


@dataclass(frozen=True)
class SweepRow:
    d_L: float
    cut: int
    TP: int
    FP: int
    n_zero_variance: int
    N: int
    K: int
    T_max: int
    t_L: float | None = None
    raw_actual_pct: float | None = None
    safe_actual_pct: float | None = None

    @property
    def precision(self) -> float | None:
        return self.TP / self.cut if self.cut else None

    @property
    def recall(self) -> float | None:
        return self.TP / self.n_zero_variance if self.n_zero_variance else None

    @property
    def safe_pct(self) -> float:
        return 100.0 * self.TP * (self.T_max - self.K) / (self.N * self.T_max)

    @property
    def raw_pct(self) -> float:
        return 100.0 * self.cut * (self.T_max - self.K) / (self.N * self.T_max)

    def clears(self, floor: float = PRECISION_FLOOR) -> bool:
        p = self.precision
        return p is not None and p >= floor

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "d_L": self.d_L,
            "t_L": self.t_L,
            "cut": self.cut,
            "TP": self.TP,
            "FP": self.FP,
            "precision": self.precision,
            "recall": self.recall,
            "safe_pct": self.safe_pct,
            "raw_pct": self.raw_pct,
            "safe_actual_pct": self.safe_actual_pct,
            "raw_actual_pct": self.raw_actual_pct,
        }


def sweep_row_from_counts(
    d_l: float, tp: int, fp: int, n_zero_variance: int, n: int, k: int, t_max: int
) -> SweepRow:
    return SweepRow(d_L=d_l, cut=tp + fp, TP=tp, FP=fp, n_zero_variance=n_zero_variance,
                    N=n, K=k, T_max=t_max)


def _saved_after(group: GroupRecord, k: int) -> int:
    return sum(max(0, t.steps_emitted - k) for t in group.trajectories)


def _row(corpus: Sequence[GroupRecord], cuts: Sequence[bool], d_l: float, k: int,
         t_l: float | None = None) -> SweepRow:
    if not corpus:
        raise ValueError("empty corpus")
    t_max = corpus[0].T_max
    zv = [g.zero_variance for g in corpus]
    tp = sum(1 for c, z in zip(cuts, zv) if c and z)
    fp = sum(1 for c, z in zip(cuts, zv) if c and not z)
    total = sum(sum(t.steps_emitted for t in g.trajectories) for g in corpus)
    raw_saved = sum(_saved_after(g, k) for g, c in zip(corpus, cuts) if c)
    safe_saved = sum(_saved_after(g, k) for g, c, z in zip(corpus, cuts, zv) if c and z)
    return SweepRow(
        d_L=d_l, cut=tp + fp, TP=tp, FP=fp, n_zero_variance=sum(zv), N=len(corpus),
        K=k, T_max=t_max, t_L=t_l,
        raw_actual_pct=100.0 * raw_saved / total if total else 0.0,
        safe_actual_pct=100.0 * safe_saved / total if total else 0.0,
    )


def sweep(
    corpus: Sequence[GroupRecord],
    k: int,
    dl_grid: Iterable[float] = DEFAULT_DL_GRID,
    tau_h: float | None = None,
) -> list[SweepRow]:
    """One row per threshold, scored against the corpus's ground-truth labels.

    The corpus must hold full (ungated) rollouts so labels are the real outcomes.
    """
    rows = []
    for d_l in dl_grid:
        cuts = [decide(g, k, d_l, tau_h=tau_h).cut for g in corpus]
        rows.append(_row(corpus, cuts, d_l, k))
    return rows


def low_tau_mirror_sweep(
    corpus: Sequence[GroupRecord],
    k_grid: Iterable[int] = (5, 10, 15, 20),
    dl_grid: Iterable[float] = MIRROR_DL_GRID,
    tl_grid: Iterable[float] = MIRROR_TL_GRID,
) -> list[SweepRow]:
    rows = []
    dl_grid, tl_grid = tuple(dl_grid), tuple(tl_grid)
    for k in k_grid:
        for t_l in tl_grid:
            for d_l in dl_grid:
                cuts = [decide(g, k, d_l, t_l=t_l).cut for g in corpus]
                rows.append(_row(corpus, cuts, d_l, k, t_l=t_l))
    return rows


def operating_points(rows: Iterable[SweepRow], floor: float = PRECISION_FLOOR) -> list[SweepRow]:
    return [r for r in rows if r.clears(floor)]


def precision_floor(eta: float, n_nonzero: int, n_cut: int) -> float:
    """Lowest gate precision keeping worst-case useful-group loss within ``eta``."""
    if n_cut <= 0:
        raise ValueError("precision floor undefined without cuts")
    return max(0.0, 1.0 - eta * n_nonzero / n_cut)


# Reference arms -----------------------------------------------------------


def random_cut(n_groups: int, budget: int, seed: int) -> list[bool]:
    if not 0 <= budget <= n_groups:
        raise ValueError(f"budget {budget} outside [0, {n_groups}]")
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(n_groups, size=budget, replace=False).tolist())
    return [i in chosen for i in range(n_groups)]


def oracle_cut(corpus: Sequence[GroupRecord]) -> list[bool]:
    return [g.zero_variance for g in corpus]


def dapo_filter(corpus: Sequence[GroupRecord]) -> list[bool]:
    """Gradient-batch keep mask of a post-hoc filter; it never cuts a rollout."""
    return [not g.zero_variance for g in corpus]


def expected_random_precision(n_zero_variance: int, n_groups: int, budget: int) -> float:
    """Exact mean precision of ``random_cut`` by enumerating the TP count."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    nz = n_groups - n_zero_variance
    total = comb(n_groups, budget)
    acc = 0.0
    for tp in range(0, budget + 1):
        ways = comb(n_zero_variance, tp) * comb(nz, budget - tp)
        acc += ways * tp / budget
    return acc / total


@dataclass(frozen=True)
class ArmRow:
    arm: str
    cut: int
    TP: int
    FP: int
    precision: float | None
    rollout_saved_pct: float
    rollout_saved_actual_pct: float
    l2_preserved_pct: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _arm(name: str, corpus: Sequence[GroupRecord], cuts: Sequence[bool],
         grad_keep: Sequence[bool], flat_adv: np.ndarray, owners: np.ndarray,
         k: int, rollout_cut: bool = True) -> ArmRow:
    row = _row(corpus, cuts, float("nan"), k)
    keep = np.asarray(grad_keep, dtype=bool)[owners]
    return ArmRow(
        arm=name,
        cut=row.cut,
        TP=row.TP,
        FP=row.FP,
        precision=row.precision,
        rollout_saved_pct=row.raw_pct if rollout_cut else 0.0,
        rollout_saved_actual_pct=(row.raw_actual_pct or 0.0) if rollout_cut else 0.0,
        l2_preserved_pct=100.0 * l2_preservation(flat_adv, keep),
    )


def arm_comparison(
    corpus: Sequence[GroupRecord],
    k: int,
    d_l: float,
    tau_h: float = 0.90,
    budget: int | None = None,
    seed: int = 0,
    epsilon: float = DEFAULT_EPSILON,
) -> list[ArmRow]:
    """Cut/precision/savings/L2 table for the gate and its reference arms."""
    n = len(corpus)
    adv = [advantages(g.rewards, epsilon).values for g in corpus]
    flat = np.concatenate([np.asarray(a) for a in adv])
    owners = np.repeat(np.arange(n), [len(a) for a in adv])

    ours = [decide(g, k, d_l).cut for g in corpus]
    or_rule = [decide(g, k, d_l, tau_h=tau_h).cut for g in corpus]
    tau_only = [g.divergence[k].tau_K >= tau_h for g in corpus]
    oracle = oracle_cut(corpus)
    if budget is None:
        budget = sum(or_rule)
    rand = random_cut(n, budget, seed)
    dapo_keep = dapo_filter(corpus)
    none = [False] * n

    def keep(cuts: Sequence[bool]) -> list[bool]:
        return [not c for c in cuts]

    return [
        _arm("no-gate", corpus, none, keep(none), flat, owners, k),
        _arm(f"random-cut (matched {budget})", corpus, rand, keep(rand), flat, owners, k),
        _arm("oracle (cut iff zv)", corpus, oracle, keep(oracle), flat, owners, k),
        _arm("dapo-oracle (post-hoc filter only)", corpus, none, dapo_keep, flat, owners, k,
             rollout_cut=False),
        _arm(f"single-axis d_K<{d_l:g}", corpus, ours, keep(ours), flat, owners, k),
        _arm(f"tau_K>={tau_h:g} only", corpus, tau_only, keep(tau_only), flat, owners, k),
        _arm("or-rule (d or tau)", corpus, or_rule, keep(or_rule), flat, owners, k),
        _arm("single-axis + dapo", corpus, ours,
             [not c and d for c, d in zip(ours, dapo_keep)], flat, owners, k),
    ]
