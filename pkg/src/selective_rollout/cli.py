"""Command-line front end: ``selective-rollout <subcommand> [flags]``.

Subcommands share one run directory (``--out-dir``). The first one to write
there fixes the configuration; later ones inherit it from ``manifest.json``
and refuse flags that would change its hash.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, dump_config, load_config
from .core import RecordError, read_jsonl, step_tokens, with_meta, write_jsonl
from .divergence import annotate_corpus
from .gate import (
    DEFAULT_DL_GRID,
    PRECISION_FLOOR,
    arm_comparison,
    low_tau_mirror_sweep,
    sweep,
)
from .report import (
    ARM_COLUMNS,
    HEATMAP_COLUMNS,
    MIRROR_COLUMNS,
    SWEEP_COLUMNS,
    TRAIN_SUMMARY_COLUMNS,
    TYPE_COLUMNS,
    Manifest,
    RunDirError,
    build_report,
    read_table,
    run_lock,
    write_table,
)
from .simenv import GateSupervisorConfig, generate_corpus
from .stats import auroc, bootstrap_ci, heatmap, per_type_breakdown

log = logging.getLogger("selective_rollout")

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_RECORD = 5
EXIT_RUNDIR = 6
EXIT_FAILURE = 1


class MissingInput(FileNotFoundError):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _float_list(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # noqa: D401
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: usage error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 42)")
    common.add_argument("--config", type=Path, default=None, help="flat key = value config file")
    common.add_argument("--out-dir", type=Path, default=Path("run"), help="run directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="selective-rollout", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("rollout", parents=[common], help="generate an ungated corpus")
    s.add_argument("--n", type=int, dest="n_groups")
    s.add_argument("--g", type=int, dest="G")
    s.add_argument("--tmax", type=int, dest="T_max")
    s.add_argument("--preset")

    s = sub.add_parser("signals", parents=[common], help="annotate the corpus with divergence signals")
    s.add_argument("--k", type=_int_list, dest="k_grid")
    s.add_argument("--in", type=Path, dest="input")

    s = sub.add_parser("sweep", parents=[common], help="threshold sweep, mirror sweep, arm table")
    s.add_argument("--k", type=int, dest="K")
    s.add_argument("--dl-grid", type=_float_list, default=DEFAULT_DL_GRID)
    s.add_argument("--dl", type=float, dest="d_L", help="operating point for the arm table")
    s.add_argument("--tau-h", type=float, default=0.90, help="tau_H for the OR-rule arm")

    s = sub.add_parser("correlate", parents=[common], help="signal heatmap and per-type AUROC")
    s.add_argument("--k", type=int, dest="K", help="K for the per-type table")
    s.add_argument("--flip", action="store_true", help="score the zero-variance class instead")

    s = sub.add_parser("abtest", parents=[common], help="paired ungated/gated rollouts")
    s.add_argument("--n", type=int, dest="n_groups")
    s.add_argument("--k", type=int, dest="K")
    s.add_argument("--dl", type=float, dest="d_L")
    s.add_argument("--tau-h", type=float, dest="tau_H")

    s = sub.add_parser("train", parents=[common], help="toy GRPO training, tier 2 or 3")
    s.add_argument("--tier", type=int, choices=(2, 3), default=3)
    s.add_argument("--arm", choices=("baseline", "gated", "both"), default="both")
    s.add_argument("--seeds", type=_int_list)
    s.add_argument("--iters", type=int, dest="tier3_iters")
    s.add_argument("--lr", type=float, dest="learning_rate")

    s = sub.add_parser("bootstrap", parents=[common], help="percentile CI of a table column mean")
    s.add_argument("--table", default="abtest_pairs", help="stamped CSV in the run directory")
    s.add_argument("--column", default="delta")
    s.add_argument("--B", type=int, dest="bootstrap_B")
    s.add_argument("--level", type=float, dest="bootstrap_level")

    sub.add_parser("report", parents=[common], help="assemble every table into one bundle")
    return p


_CONFIG_FLAGS = ("n_groups", "G", "T_max", "preset", "k_grid", "K", "d_L", "tau_H", "seeds",
                 "tier3_iters", "learning_rate", "bootstrap_B", "bootstrap_level")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < ``--config`` file (or the run's recorded config) < flags."""
    flags: dict[str, Any] = {k: getattr(args, k, None) for k in _CONFIG_FLAGS}
    flags["seed"] = args.seed
    if args.config is None:
        m = Manifest.load(args.out_dir)
        if m is not None:
            base = load_config(None, m.config)
            return base.override(**flags)
    return load_config(args.config, flags)


# Subcommands ----------------------------------------------------------------


class Context:
    def __init__(self, cfg: RunConfig, out_dir: Path, argv: Sequence[str]):
        self.cfg = cfg
        self.hash = cfg.hash()
        self.out = out_dir
        self.command = " ".join(argv)
        self.manifest = Manifest.open(out_dir, self.hash, cfg.seed, cfg.to_dict())

    def path(self, name: str) -> Path:
        return self.out / name

    def need(self, name: str | Path) -> Path:
        p = Path(name)
        p = p if p.is_absolute() or p.parent != Path(".") else self.path(str(p))
        if not p.exists():
            raise MissingInput(f"missing input file {p}")
        return p

    def stamp_groups(self, groups):
        return [with_meta(g, config_hash=self.hash, seed=self.cfg.seed) for g in groups]

    def load_groups(self, name: str | Path):
        p = self.need(name)
        groups = read_jsonl(p)
        bad = {g.meta.get("config_hash") for g in groups} - {self.hash}
        if bad:
            raise RunDirError(f"{p}: generated under config {sorted(map(str, bad))[0]}, "
                              f"current run is {self.hash}")
        return groups

    def table(self, name: str, rows, columns, title: str = "", inputs: Sequence[str] = ()) -> None:
        paths = write_table(self.path(name), rows, columns, self.hash, self.cfg.seed, title)
        self.manifest.record(self.out, paths, self.command, inputs)
        print(paths[1].read_text(), end="")

    def jsonl(self, name: str, groups, inputs: Sequence[str] = ()) -> Path:
        p = self.path(name)
        write_jsonl(p, groups)
        self.manifest.record(self.out, [p], self.command, inputs)
        return p

    def json(self, name: str, obj: dict, inputs: Sequence[str] = ()) -> Path:
        p = self.path(name)
        p.write_text(json.dumps({"config_hash": self.hash, "seed": self.cfg.seed, **obj},
                                indent=2, sort_keys=True) + "\n")
        self.manifest.record(self.out, [p], self.command, inputs)
        return p


def cmd_rollout(ctx: Context, args: argparse.Namespace) -> None:
    c = ctx.cfg
    corpus = generate_corpus(c.n_groups, c.G, c.T_max, c.seed, c.preset, n_locations=c.n_locations)
    p = ctx.jsonl("corpus.jsonl", ctx.stamp_groups(corpus))
    cfg_path = ctx.path("config.txt")
    cfg_path.write_text(dump_config(c))
    ctx.manifest.record(ctx.out, [cfg_path], ctx.command)
    labels = [g.label for g in corpus]
    print(f"wrote {len(corpus)} groups to {p}; labels: "
          + ", ".join(f"{lab}={labels.count(lab)}" for lab in ("all_fail", "mixed", "all_succeed")))


def cmd_signals(ctx: Context, args: argparse.Namespace) -> None:
    src = args.input or "corpus.jsonl"
    groups = annotate_corpus(ctx.load_groups(src), ctx.cfg.k_grid)
    p = ctx.jsonl("signals.jsonl", groups, inputs=[str(src)])
    print(f"annotated {len(groups)} groups at K={list(ctx.cfg.k_grid)} -> {p}")


def _signals(ctx: Context):
    groups = ctx.load_groups("signals.jsonl")
    ks = set(groups[0].divergence) if groups else set()
    if ctx.cfg.K not in ks:
        raise RecordError(f"signals.jsonl has no divergence at K={ctx.cfg.K}; rerun signals")
    return groups


def cmd_sweep(ctx: Context, args: argparse.Namespace) -> None:
    c = ctx.cfg
    corpus = _signals(ctx)
    rows = [r.to_dict() for r in sweep(corpus, c.K, args.dl_grid, c.tau_H)]
    ctx.table("sweep", rows, SWEEP_COLUMNS, f"gate sweep at K={c.K}", ["signals.jsonl"])
    ks = [k for k in (5, 10, 15, 20) if k in corpus[0].divergence]
    mirror = low_tau_mirror_sweep(corpus, ks)
    ctx.table("mirror_sweep", [r.to_dict() for r in mirror], MIRROR_COLUMNS,
              "low-tau mirror sweep", ["signals.jsonl"])
    if not any(r.clears(PRECISION_FLOOR) for r in mirror):
        print(f"NEGATIVE RESULT: no mirror operating point reaches precision {PRECISION_FLOOR:.2f}")
    arms = arm_comparison(corpus, c.K, c.d_L, tau_h=args.tau_h, seed=c.seed, epsilon=c.epsilon)
    ctx.table("arms", [a.to_dict() for a in arms], ARM_COLUMNS,
              f"reference arms at K={c.K}, d_L={c.d_L:g}", ["signals.jsonl"])


def cmd_correlate(ctx: Context, args: argparse.Namespace) -> None:
    c = ctx.cfg
    corpus = _signals(ctx)
    ks = sorted(corpus[0].divergence)
    cells = heatmap(corpus, k_grid=ks, flip=args.flip)
    ctx.table("heatmap", [x.to_dict() for x in cells], HEATMAP_COLUMNS,
              "signal vs reward variance", ["signals.jsonl"])
    rows, med_glob, med_best = per_type_breakdown(corpus, c.K, k_grid=ks)
    out = [r.to_dict() for r in rows]
    out.append({"task_type": "median", "global_auroc": med_glob, "best_auroc": med_best})
    ctx.table("per_type", out, TYPE_COLUMNS, f"per-type AUROC (global d_K at K={c.K})",
              ["signals.jsonl"])


def abtest_pairs(baseline, gated) -> list[dict[str, Any]]:
    rows = []
    for b, g in zip(baseline, gated):
        if b.prompt_id != g.prompt_id:
            raise RecordError(f"unpaired groups {b.prompt_id} / {g.prompt_id}")
        tb, tg = step_tokens(b), step_tokens(g)
        rows.append({"prompt_id": b.prompt_id, "task_type": b.task_type, "label": b.label,
                     "cut": g.is_cut, "baseline_tokens": tb, "gated_tokens": tg,
                     "delta": tb - tg})
    return rows


def run_abtest(cfg: RunConfig) -> dict[str, Any]:
    """Paired arms sharing every random stream; labels come from the ungated arm."""
    gate = GateSupervisorConfig(K=cfg.K, d_L=cfg.d_L, tau_H=cfg.tau_H)
    baseline = generate_corpus(cfg.n_groups, cfg.G, cfg.T_max, cfg.seed, cfg.preset,
                               n_locations=cfg.n_locations)
    gated = generate_corpus(cfg.n_groups, cfg.G, cfg.T_max, cfg.seed, cfg.preset, gate=gate,
                            n_locations=cfg.n_locations)
    pairs = abtest_pairs(baseline, gated)
    cuts = [p["cut"] for p in pairs]
    tp = sum(1 for p in pairs if p["cut"] and p["label"] != "mixed")
    annotated = annotate_corpus(baseline, (cfg.K,))
    nonzero = [0 if g.zero_variance else 1 for g in annotated]
    tb = sum(p["baseline_tokens"] for p in pairs)
    tg = sum(p["gated_tokens"] for p in pairs)
    ci = bootstrap_ci(np.array([p["delta"] for p in pairs], dtype=float), B=cfg.bootstrap_B,
                      level=cfg.bootstrap_level, seed=cfg.seed)
    summary = {
        "n_groups": len(pairs), "K": cfg.K, "d_L": cfg.d_L,
        "baseline_step_tokens": tb, "gated_step_tokens": tg,
        "saved_pct": 100.0 * (tb - tg) / tb if tb else 0.0,
        "cut": sum(cuts), "TP": tp, "FP": sum(cuts) - tp,
        "precision": tp / sum(cuts) if sum(cuts) else None,
        "auroc_d_K": auroc([g.divergence[cfg.K].d_K for g in annotated], nonzero)
        if 0 < sum(nonzero) < len(nonzero) else None,
        "mean_delta": ci.point_estimate, "ci_low": ci.ci_low, "ci_high": ci.ci_high,
        "ci_level": ci.level, "B": ci.B,
    }
    return {"baseline": baseline, "gated": gated, "pairs": pairs, "summary": summary}


ABTEST_COLUMNS = ("n_groups", "K", "d_L", "baseline_step_tokens", "gated_step_tokens", "saved_pct",
                  "cut", "TP", "FP", "precision", "auroc_d_K", "mean_delta", "ci_low", "ci_high")


def cmd_abtest(ctx: Context, args: argparse.Namespace) -> None:
    t0 = time.perf_counter()
    res = run_abtest(ctx.cfg)
    ctx.jsonl("abtest_baseline.jsonl", ctx.stamp_groups(res["baseline"]))
    ctx.jsonl("abtest_gated.jsonl", ctx.stamp_groups(res["gated"]))
    pair_paths = write_table(ctx.path("abtest_pairs"), res["pairs"], list(res["pairs"][0]),
                             ctx.hash, ctx.cfg.seed)
    ctx.manifest.record(ctx.out, pair_paths, ctx.command)
    ctx.table("abtest", [res["summary"]], ABTEST_COLUMNS, "paired A/B (step-tokens)")
    log.info("abtest elapsed %.2fs", time.perf_counter() - t0)


def _train_summary(records, tier: int) -> list[dict[str, Any]]:
    rows = []
    keys = sorted({(r.seed, r.arm) for r in records})
    for seed, arm in keys:
        rs = [r for r in records if r.seed == seed and r.arm == arm]
        upd = [r for r in rs if not r.skipped]
        cuts = sum(r.cut_count for r in rs)
        tp = sum(r.tp_cuts for r in rs)
        held = [r.heldout_success for r in rs if r.heldout_success is not None]
        uncut = [r.uncut_step_tokens for r in rs if r.uncut_step_tokens is not None]
        rows.append({
            "tier": tier, "seed": seed, "arm": arm, "iterations": len(rs), "cuts": cuts,
            "tp_cuts": tp, "precision": tp / cuts if cuts else None,
            "zero_adv_fraction": float(np.mean([r.zero_advantage_item_fraction for r in upd])) if upd else None,
            "mean_gradient_l2": float(np.mean([r.gradient_l2 for r in upd])) if upd else None,
            "step_tokens": rs[-1].cumulative_step_tokens,
            "uncut_step_tokens": sum(uncut) if uncut else None,
            "heldout_first": held[0] if held else None,
            "heldout_final": held[-1] if held else None,
        })
    return rows


DILUTION_COLUMNS = ("tier", "z_base", "z_gated", "predicted", "measured", "relative_error")


def cmd_train(ctx: Context, args: argparse.Namespace) -> None:
    from .toytrain import dilution_check, run_tier2, run_tier3

    c = ctx.cfg
    arms = ("baseline", "gated") if args.arm == "both" else (args.arm,)
    inputs: list[str] = []
    if args.tier == 2:
        if ctx.path("signals.jsonl").exists():
            buffer = ctx.load_groups("signals.jsonl")
            inputs = ["signals.jsonl"]
        else:
            buffer = annotate_corpus(generate_corpus(c.n_groups, c.G, c.T_max, c.seed, c.preset,
                                                     n_locations=c.n_locations), (c.K,))
        records = []
        for s in c.seeds:
            records += run_tier2(buffer, c.tier2_steps, c.groups_per_step, c.K, c.d_L,
                                 c.learning_rate, c.position_cap, s, c.epsilon, c.n_locations,
                                 c.rollout_temperature)
        records = [r for r in records if r.arm in arms]
    else:
        res = run_tier3(c.tier3_iters, c.prompts_per_iter, c.seeds, c.eval_every, c.heldout, c.G,
                        c.T_max, c.K, c.d_L, c.learning_rate, c.epsilon, c.tier3_locations, arms,
                        temperature=c.rollout_temperature, eval_temperature=c.eval_temperature)
        records = res.records
    p = ctx.path(f"train_tier{args.tier}.jsonl")
    with open(p, "w") as fh:
        for r in records:
            fh.write(json.dumps({**r.to_dict(), "config_hash": ctx.hash}, sort_keys=True) + "\n")
    ctx.manifest.record(ctx.out, [p], ctx.command, inputs)
    ctx.table(f"train_summary_tier{args.tier}", _train_summary(records, args.tier),
              TRAIN_SUMMARY_COLUMNS, f"tier {args.tier} training summary", [p.name])
    if set(arms) == {"baseline", "gated"}:
        chk = dilution_check(records)
        ctx.table(f"dilution_tier{args.tier}", [{"tier": args.tier, **chk.to_dict()}],
                  DILUTION_COLUMNS, "gradient-norm ratio: measured vs predicted", [p.name])


def cmd_bootstrap(ctx: Context, args: argparse.Namespace) -> None:
    src = ctx.need(f"{args.table}.csv")
    meta, rows = read_table(src)
    if meta.get("config_hash") != ctx.hash:
        raise RunDirError(f"{src}: config hash {meta.get('config_hash')} differs from {ctx.hash}")
    if not rows or args.column not in rows[0]:
        raise RecordError(f"{src}: no column {args.column!r}")
    vals = np.array([float(r[args.column]) for r in rows])
    res = bootstrap_ci(vals, B=ctx.cfg.bootstrap_B, level=ctx.cfg.bootstrap_level, seed=ctx.cfg.seed)
    ctx.table("bootstrap", [{"table": args.table, "column": args.column, "n": len(vals),
                             **res.to_dict()}],
              ("table", "column", "n", "point_estimate", "ci_low", "ci_high", "B", "level", "seed"),
              "percentile bootstrap of the mean", [src.name])


def cmd_report(ctx: Context, args: argparse.Namespace) -> None:
    ctx.manifest.save(ctx.out)
    bundle = build_report(ctx.out)
    text = ctx.path("report.txt")
    text.write_text(bundle.to_text())
    js = ctx.path("report.json")
    js.write_text(json.dumps(bundle.to_dict(), indent=2, sort_keys=True) + "\n")
    ctx.manifest.record(ctx.out, [text, js], ctx.command)
    print(bundle.to_text(), end="")


COMMANDS = {
    "rollout": cmd_rollout,
    "signals": cmd_signals,
    "sweep": cmd_sweep,
    "correlate": cmd_correlate,
    "abtest": cmd_abtest,
    "train": cmd_train,
    "bootstrap": cmd_bootstrap,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        with run_lock(args.out_dir):
            ctx = Context(cfg, args.out_dir, [args.command, *argv[1:]])
            COMMANDS[args.command](ctx, args)
            ctx.manifest.save(ctx.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingInput as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except RecordError as exc:
        print(f"bad record: {exc}", file=sys.stderr)
        return EXIT_RECORD
    except RunDirError as exc:
        print(f"run directory error: {exc}", file=sys.stderr)
        return EXIT_RUNDIR
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return 0
