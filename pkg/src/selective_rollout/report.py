"""Run-directory plumbing: provenance-stamped tables, the manifest, the report bundle."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

MANIFEST = "manifest.json"
LOCKFILE = ".lock"


class RunDirError(RuntimeError):
    """The run directory is locked, inconsistent, or missing an input."""


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@contextmanager
def run_lock(out_dir: str | Path) -> Iterator[Path]:
    """Exclusive lock on a run directory for the life of one subcommand."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    lock = d / LOCKFILE
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunDirError(f"run directory {d} is locked by another process ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield d
    finally:
        lock.unlink(missing_ok=True)


# Tables ---------------------------------------------------------------------


def _coerce(v: Any) -> Any:
    # CSV cells come back as strings; render numeric ones like fresh values
    if isinstance(v, str) and v and any(ch.isdigit() for ch in v):
        try:
            return int(v)
        except ValueError:
            try:
                return float(v)
            except ValueError:
                return v
    return v or None if isinstance(v, str) else v


def _cell(v: Any) -> str:
    v = _coerce(v)
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return "nan" if v != v else f"{v:.4g}" if abs(v) < 1e-3 and v != 0 else f"{v:.4f}".rstrip("0").rstrip(".")
    return str(v)


def format_table(rows: Sequence[Mapping[str, Any]], columns: Sequence[str]) -> str:
    body = [[_cell(r.get(c)) for c in columns] for r in rows]
    widths = [max([len(c)] + [len(b[i]) for b in body]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(x.rjust(w) for x, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def stamp(config_hash: str, seed: int) -> str:
    return f"# config_hash={config_hash} seed={seed}"


def write_table(base: str | Path, rows: Sequence[Mapping[str, Any]], columns: Sequence[str],
                config_hash: str, seed: int, title: str = "") -> list[Path]:
    """Write ``base.csv`` and ``base.txt``; both start with the provenance stamp."""
    base = Path(base)
    csv_path = base.with_suffix(".csv")
    buf = io.StringIO()
    buf.write(stamp(config_hash, seed) + "\n")
    w = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: "" if r.get(c) is None else r.get(c) for c in columns})
    csv_path.write_text(buf.getvalue())
    txt_path = base.with_suffix(".txt")
    head = [stamp(config_hash, seed)] + ([title] if title else [])
    txt_path.write_text("\n".join(head + [format_table(rows, columns)]) + "\n")
    return [csv_path, txt_path]


def read_table(path: str | Path) -> tuple[dict[str, str], list[dict[str, str]]]:
    """Rows of a stamped CSV plus its ``config_hash``/``seed`` stamp."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# "):
        raise RunDirError(f"{path}: missing provenance stamp")
    meta = dict(kv.split("=", 1) for kv in lines[0][2:].split())
    return meta, list(csv.DictReader(lines[1:]))


# Manifest -------------------------------------------------------------------


@dataclass
class Manifest:
    config_hash: str
    seed: int
    config: dict[str, Any]
    files: dict[str, dict[str, Any]] = field(default_factory=dict)

    @classmethod
    def load(cls, out_dir: str | Path) -> "Manifest | None":
        p = Path(out_dir) / MANIFEST
        if not p.exists():
            return None
        try:
            d = json.loads(p.read_text())
            return cls(d["config_hash"], int(d["seed"]), d["config"], d.get("files", {}))
        except (ValueError, KeyError) as exc:
            raise RunDirError(f"{p}: unreadable manifest ({exc})") from None

    @classmethod
    def open(cls, out_dir: str | Path, config_hash: str, seed: int,
             config: dict[str, Any]) -> "Manifest":
        """Existing manifest for this configuration, or a fresh one.

        A run directory holds outputs of exactly one configuration.
        """
        m = cls.load(out_dir)
        if m is None:
            return cls(config_hash, seed, config)
        if m.config_hash != config_hash or m.seed != seed:
            raise RunDirError(
                f"{out_dir} holds outputs of config {m.config_hash} seed {m.seed}; "
                f"refusing to add config {config_hash} seed {seed}")
        return m

    def record(self, out_dir: str | Path, paths: Sequence[Path], command: str,
               inputs: Sequence[str] = ()) -> None:
        for p in paths:
            self.files[p.name] = {"sha256": file_sha256(p), "command": command,
                                  "inputs": list(inputs)}

    def save(self, out_dir: str | Path) -> Path:
        p = Path(out_dir) / MANIFEST
        p.write_text(json.dumps({"config_hash": self.config_hash, "seed": self.seed,
                                 "config": self.config, "files": self.files},
                                indent=2, sort_keys=True) + "\n")
        return p

    def verify(self, out_dir: str | Path) -> None:
        for name, entry in self.files.items():
            p = Path(out_dir) / name
            if not p.exists():
                raise RunDirError(f"{p}: listed in the manifest but missing")
            if file_sha256(p) != entry["sha256"]:
                raise RunDirError(f"{p}: contents changed since it was recorded")


def jsonl_config_hashes(path: str | Path) -> set[str]:
    hashes = set()
    with open(path) as fh:
        for line in fh:
            if line.strip():
                hashes.add(json.loads(line).get("config_hash"))
    return hashes


# Bundle ---------------------------------------------------------------------


SWEEP_COLUMNS = ("K", "d_L", "cut", "TP", "FP", "precision", "recall", "safe_pct", "raw_pct",
                 "safe_actual_pct", "raw_actual_pct")
MIRROR_COLUMNS = ("K", "t_L", "d_L", "cut", "TP", "FP", "precision", "recall")
ARM_COLUMNS = ("arm", "cut", "TP", "FP", "precision", "rollout_saved_pct",
               "rollout_saved_actual_pct", "l2_preserved_pct")
HEATMAP_COLUMNS = ("metric", "K", "spearman_rho", "p_value", "auroc", "n")
TYPE_COLUMNS = ("task_type", "n", "n_zv", "global_auroc", "best_metric", "best_K", "best_auroc",
                "single_observation", "note")
TRAIN_SUMMARY_COLUMNS = ("tier", "seed", "arm", "iterations", "cuts", "tp_cuts", "precision",
                         "zero_adv_fraction", "mean_gradient_l2", "step_tokens", "uncut_step_tokens",
                         "heldout_first", "heldout_final")


@dataclass
class ReportBundle:
    config_hash: str
    seed: int
    tables: dict[str, list[dict[str, str]]]
    mirror_negative: bool | None
    notes: list[str]
    manifest: Manifest

    def to_dict(self) -> dict[str, Any]:
        return {"config_hash": self.config_hash, "seed": self.seed,
                "mirror_rule_clears_floor": None if self.mirror_negative is None
                else not self.mirror_negative,
                "tables": self.tables, "notes": self.notes,
                "inputs": {k: v["sha256"] for k, v in self.manifest.files.items()}}

    def to_text(self) -> str:
        out = [stamp(self.config_hash, self.seed)]
        for name, rows in self.tables.items():
            if rows:
                out += ["", f"[{name}]", format_table(rows, list(rows[0].keys()))]
        out += [""] + self.notes
        return "\n".join(out) + "\n"


_TABLE_ORDER = ("sweep", "mirror_sweep", "arms", "heatmap", "per_type", "abtest", "bootstrap")
_SKIP_TABLES = {"abtest_pairs"}


def _table_names(d: Path) -> list[str]:
    names = {p.stem for p in d.glob("*.csv")} - _SKIP_TABLES
    first = [n for n in _TABLE_ORDER if n in names]
    return first + sorted(names - set(first))


def build_report(out_dir: str | Path, floor: float = 0.80) -> ReportBundle:
    """Collect every stamped table in ``out_dir``; all must share one config hash."""
    d = Path(out_dir)
    m = Manifest.load(d)
    if m is None:
        raise RunDirError(f"{d}: no {MANIFEST}; nothing to report")
    m.verify(d)
    tables: dict[str, list[dict[str, str]]] = {}
    for name in _table_names(d):
        p = d / f"{name}.csv"
        meta, rows = read_table(p)
        if meta.get("config_hash") != m.config_hash:
            raise RunDirError(f"{p}: config hash {meta.get('config_hash')} differs from "
                              f"run {m.config_hash}; refusing to mix")
        tables[name] = rows
    for p in sorted(d.glob("*.jsonl")):
        other = jsonl_config_hashes(p) - {m.config_hash}
        if other:
            raise RunDirError(f"{p}: records from config {sorted(map(str, other))[0]}; "
                              f"refusing to mix with {m.config_hash}")
    notes = []
    mirror_negative = None
    if "mirror_sweep" in tables:
        ok = [r for r in tables["mirror_sweep"] if r["precision"] and float(r["precision"]) >= floor]
        mirror_negative = not ok
        if mirror_negative:
            notes.append(f"NEGATIVE RESULT: the low-tau mirror rule has no operating point with "
                         f"precision >= {floor:.2f} on this corpus.")
        else:
            notes.append(f"mirror rule: {len(ok)} operating points reach precision >= {floor:.2f}.")
    return ReportBundle(m.config_hash, m.seed, tables, mirror_negative, notes, m)
