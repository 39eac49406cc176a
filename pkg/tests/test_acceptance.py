"""Acceptance criteria 1-10, one PASS/FAIL line each at the stated tolerances."""
from __future__ import annotations

import itertools
import json
import time
from dataclasses import replace

import numpy as np
import pytest

from selective_rollout.cli import main, run_abtest
from selective_rollout.config import RunConfig
from selective_rollout.core import DivergenceVector
from selective_rollout.divergence import annotate_corpus, levenshtein
from selective_rollout.gate import PRECISION_FLOOR, low_tau_mirror_sweep, precision_floor, sweep
from selective_rollout.grpo import advantages, dilution_ratio
from selective_rollout.simenv import TASK_TYPES, SearchWorld, SyntheticPolicy, generate_corpus, rollout_group
from selective_rollout.stats import auroc, bootstrap_ci, spearman_rho
from selective_rollout.toytrain import (
    TabularPolicy,
    batch_gradient,
    batch_objective,
    compile_batch,
    run_tier3,
)

from conftest import group


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def test_criterion_01_advantages(report):
    t0 = time.perf_counter()
    ok = True
    worst = 0.0
    for G in range(2, 11):
        for bits in itertools.product((0, 1), repeat=G):
            a = np.array(advantages(bits, epsilon=1e-4).values)
            if len(set(bits)) == 1:
                ok &= bool(np.all(a == 0.0))
                continue
            ok &= not np.all(a == 0.0)
            a0 = np.array(advantages(bits, epsilon=0.0).values)
            worst = max(worst, abs(a0.mean()), abs(a0.std() - 1.0))
    dt = time.perf_counter() - t0
    ok &= worst <= 1e-12 and dt < 1.0
    report(1, ok, f"2^G vectors G=2..10, max |mean|,|std-1| = {worst:.1e}, {dt:.2f}s")


def test_criterion_02_table_row(report):
    # 100 groups: 39 zero-variance; gate cuts 17 of them and 4 mixed ones
    corpus = []
    for i in range(100):
        zv = i < 39
        cut = i < 17 or 39 <= i < 43
        g = group([["a"], ["a"]], [1, 1] if zv else [1, 0], prompt_id=f"p{i}")
        dv = DivergenceVector(10, 0.05 if cut else 0.5, *([0.0] * 6))
        corpus.append(replace(g, divergence={10: dv}))
    r = sweep(corpus, 10, [0.12])[0]
    ok = (r.cut, r.TP) == (21, 17) and abs(r.safe_pct - 11.3) <= 0.05 and abs(r.raw_pct - 14.0) <= 0.05
    ok &= round(r.precision, 2) == 0.81 and round(r.recall, 2) == 0.44
    report(2, ok, f"safe={r.safe_pct:.2f}% raw={r.raw_pct:.2f}% precision={r.precision:.3f} "
                  f"recall={r.recall:.3f}")


def test_criterion_03_precision_floor(report):
    v = precision_floor(0.10, 61, 21)
    report(3, 0.705 <= v <= 0.715, f"precision_floor(0.10, 61, 21) = {v:.4f}")


def test_criterion_04_dilution(report):
    ratio = dilution_ratio(0.40, 0.28)
    pol = TabularPolicy.init()
    explore = SyntheticPolicy(0.3, 0.5)
    sure = SyntheticPolicy(1.0, 1.0, loop_size=1)
    mixed = [g for g in (rollout_group(SearchWorld(i % 12), explore, G=4, T_max=20, seed=i,
                                       prompt_id=f"m{i}") for i in range(60))
             if not g.zero_variance]
    zv = [rollout_group(SearchWorld(i % 12), sure, G=4, T_max=20, seed=i, prompt_id=f"z{i}")
          for i in range(16)]
    worst = 0.0
    checked = 0
    for n_mixed in range(1, 9):
        for n_zv in range(0, 17 - n_mixed):
            full = compile_batch(mixed[:n_mixed] + zv[:n_zv], pol)
            filt = compile_batch(mixed[:n_mixed], pol)
            n, m = full.n_traj, full.n_zero_advantage
            assert n <= 64
            g_full = np.linalg.norm(batch_gradient(pol.logits, full, pol.temperature))
            g_filt = np.linalg.norm(batch_gradient(pol.logits, filt, pol.temperature))
            worst = max(worst, abs(g_full / g_filt - (n - m) / n))
            checked += 1
    ok = ratio == 1.2 and worst <= 1e-9
    report(4, ok, f"dilution_ratio(0.40, 0.28) = {ratio!r}; {checked} matched batches, "
                  f"max identity error {worst:.1e}")


def full_dp(a, b):
    d = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    d[:, 0] = np.arange(len(a) + 1)
    d[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return int(d[-1, -1])


def test_criterion_05_edit_distance(report):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()

    def rand_seq():
        vocab = int(rng.integers(1, 6))
        return tuple(rng.integers(0, vocab, size=int(rng.integers(0, 13))).tolist())

    mismatches = 0
    for _ in range(10_000):
        a, b = rand_seq(), rand_seq()
        mismatches += levenshtein(a, b) != full_dp(a, b)
    violations = 0
    for _ in range(2_000):
        a, b, c = rand_seq(), rand_seq(), rand_seq()
        violations += levenshtein(a, b) != levenshtein(b, a)
        violations += levenshtein(a, c) > levenshtein(a, b) + levenshtein(b, c)
    dt = time.perf_counter() - t0
    report(5, mismatches == 0 and violations == 0 and dt < 10.0,
           f"10^4 pairs vs full DP: {mismatches} mismatches; 2000 triples: {violations} "
           f"metric violations; {dt:.2f}s")


def oracle_ranks(x):
    x = list(x)
    order = sorted(range(len(x)), key=lambda i: x[i])
    ranks = [0.0] * len(x)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and x[order[j + 1]] == x[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return np.array(ranks)


def test_criterion_06_statistics(report):
    rng = np.random.default_rng(6)
    auroc_bad = 0
    fixtures = 0
    while fixtures < 200:
        n = int(rng.integers(2, 13))
        s = rng.integers(0, 5, size=n).astype(float)
        y = rng.integers(0, 2, size=n)
        if not 0 < y.sum() < n:
            continue
        fixtures += 1
        pos, neg = s[y == 1], s[y == 0]
        pairs = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
        auroc_bad += auroc(s, y) != pairs / (len(pos) * len(neg))
    rho_err = 0.0
    for _ in range(200):
        n = int(rng.integers(3, 30))
        x = rng.integers(0, 6, size=n).astype(float)
        z = rng.integers(0, 6, size=n).astype(float)
        rx, rz = oracle_ranks(x), oracle_ranks(z)
        if rx.std() == 0 or rz.std() == 0:
            continue
        rho_err = max(rho_err, abs(spearman_rho(x, z)[0] - np.corrcoef(rx, rz)[0, 1]))
    data = np.array([2.0, 3.0, 7.0])
    boot = bootstrap_ci(data, B=27, level=0.95, seed=0)
    means = sorted(data[list(ix)].mean() for ix in itertools.product(range(3), repeat=3))
    lo = np.quantile(means, 0.025, method="inverted_cdf")
    hi = np.quantile(means, 0.975, method="inverted_cdf")
    boot_ok = boot.exhaustive and boot.B == 27 and (boot.ci_low, boot.ci_high) == (lo, hi)
    report(6, auroc_bad == 0 and rho_err <= 1e-9 and boot_ok,
           f"AUROC {fixtures - auroc_bad}/{fixtures} exact; Spearman max err {rho_err:.1e}; "
           f"bootstrap n=3 B=27 [{boot.ci_low:.3f}, {boot.ci_high:.3f}] vs [{lo:.3f}, {hi:.3f}]")


def test_criterion_07_gradient_check(report):
    rng = np.random.default_rng(7)
    pol = TabularPolicy.init()
    explore = SyntheticPolicy(0.4, 0.5)
    groups = [rollout_group(SearchWorld(i % 12, t), explore, G=4, T_max=20, seed=i, prompt_id=f"g{i}")
              for i, t in enumerate(TASK_TYPES * 2)]
    batch = compile_batch(groups, pol)
    rows = np.unique(batch.states)
    h = 1e-4
    worst = 0.0
    for _ in range(100):
        logits = rng.normal(scale=1.5, size=pol.logits.shape)
        g = batch_gradient(logits, batch, 0.7)
        for s in rows:
            for a in range(logits.shape[1]):
                up, dn = logits.copy(), logits.copy()
                up[s, a] += h
                dn[s, a] -= h
                fd = (batch_objective(up, batch, 0.7) - batch_objective(dn, batch, 0.7)) / (2 * h)
                worst = max(worst, abs(fd - g[s, a]))
    report(7, worst <= 1e-6, f"100 random points, {len(rows)} states x 13 actions, "
                             f"max |analytic - central FD| = {worst:.2e}")


@pytest.fixture(scope="module")
def canonical_corpus():
    return annotate_corpus(generate_corpus(500, seed=42))


def test_criterion_08_end_to_end(report):
    t0 = time.perf_counter()
    res = run_abtest(RunConfig(n_groups=500, seed=42, K=10, d_L=0.12))
    dt = time.perf_counter() - t0
    s = res["summary"]
    ok = (s["gated_step_tokens"] < s["baseline_step_tokens"] and s["precision"] is not None
          and s["precision"] >= 0.80 and s["auroc_d_K"] >= 0.70 and dt < 60.0)
    report(8, ok, f"500 groups: step_tokens {s['baseline_step_tokens']} -> {s['gated_step_tokens']} "
                  f"(-{s['saved_pct']:.1f}%), precision {s['precision']:.3f} ({s['TP']}/{s['cut']}), "
                  f"d_10 AUROC {s['auroc_d_K']:.3f}, {dt:.1f}s")


@pytest.fixture(scope="module")
def tier3_run():
    return run_tier3(iters=60, prompts_per_iter=10, seeds=(7, 13, 23, 42))


def test_criterion_09_tier3_consistency(report, tier3_run):
    res = tier3_run
    chk = res.check()
    cuts = sum(r.cut_count for r in res.records if r.arm == "gated")
    ok = chk.relative_error <= 0.10 and cuts > 0
    report(9, ok, f"4 seeds x 60 iters, {cuts} cuts: measured {chk.measured:.4f} vs predicted "
                  f"{chk.predicted:.4f} (z_base {chk.z_base:.3f}, z_gated {chk.z_gated:.3f}), "
                  f"rel err {chk.relative_error:.3f}")


def test_tier3_gated_arm_spends_fewer_tokens(tier3_run):
    for seed in (7, 13, 23, 42):
        last = {r.arm: r for r in tier3_run.records if r.seed == seed}
        cuts = sum(r.cut_count for r in tier3_run.records if r.seed == seed and r.arm == "gated")
        assert cuts > 0
        assert last["gated"].cumulative_step_tokens < last["baseline"].cumulative_step_tokens


def test_criterion_10_mirror_negative(report, canonical_corpus, tmp_path):
    mixed_tau = [g.divergence[10].tau_K for g in canonical_corpus if not g.zero_variance]
    rows = low_tau_mirror_sweep(canonical_corpus)
    best = max(r.precision for r in rows if r.precision is not None)
    out = ["--out-dir", str(tmp_path)]
    for cmd in (["rollout", "--n", "500", "--seed", "42"], ["signals"], ["sweep"], ["report"]):
        assert main([*cmd, *out]) == 0
    flagged = json.loads((tmp_path / "report.json").read_text())["mirror_rule_clears_floor"] is False
    ok = best < PRECISION_FLOOR and flagged and float(np.median(mixed_tau)) <= 0.05
    report(10, ok, f"{len(rows)} grid points, best precision {best:.3f} < {PRECISION_FLOOR}; "
                   f"median tau_10 of mixed groups {np.median(mixed_tau):.3f}; report flag set: {flagged}")
