"""Run configuration: flat ``key = value`` files, range checks, stable hashing."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    """Malformed or out-of-range configuration; the message names the field."""


@dataclass(frozen=True)
class RunConfig:
    G: int = 8
    T_max: int = 30
    K: int = 10
    d_L: float = 0.12
    tau_H: float | None = None
    epsilon: float = 1e-4
    seed: int = 42
    n_groups: int = 100
    k_grid: tuple[int, ...] = (5, 10, 15, 20)
    preset: str = "alfworld"
    n_locations: int = 12
    rollout_temperature: float = 0.7
    eval_temperature: float = 0.0
    seeds: tuple[int, ...] = (7, 13, 23, 42)
    learning_rate: float = 10.0
    tier2_steps: int = 20
    groups_per_step: int = 4
    position_cap: int = 8
    tier3_iters: int = 60
    prompts_per_iter: int = 10
    eval_every: int = 10
    heldout: int = 50
    tier3_locations: int = 24
    bootstrap_B: int = 1000
    bootstrap_level: float = 0.95

    def __post_init__(self) -> None:
        def need(ok: bool, name: str, why: str) -> None:
            if not ok:
                raise ConfigError(f"{name}: {why} (got {getattr(self, name)!r})")

        need(self.G >= 2, "G", "must be >= 2")
        need(self.T_max >= 2, "T_max", "must be >= 2")
        need(1 <= self.K < self.T_max, "K", "must satisfy 1 <= K < T_max")
        need(0.0 <= self.d_L <= 1.0, "d_L", "must lie in [0, 1]")
        need(self.tau_H is None or 0.0 <= self.tau_H <= 1.0, "tau_H", "must lie in [0, 1]")
        need(self.epsilon >= 0.0, "epsilon", "must be non-negative")
        need(self.seed >= 0, "seed", "must be non-negative")
        need(self.n_groups >= 1, "n_groups", "must be >= 1")
        need(len(self.k_grid) > 0 and all(1 <= k <= self.T_max for k in self.k_grid),
             "k_grid", "entries must lie in [1, T_max]")
        need(self.n_locations >= 2, "n_locations", "must be >= 2")
        need(self.tier3_locations >= 2, "tier3_locations", "must be >= 2")
        need(self.rollout_temperature > 0.0, "rollout_temperature", "must be positive")
        need(self.eval_temperature >= 0.0, "eval_temperature", "must be non-negative")
        need(len(self.seeds) > 0 and all(s >= 0 for s in self.seeds), "seeds",
             "must be a non-empty list of non-negative integers")
        need(self.learning_rate > 0.0, "learning_rate", "must be positive")
        for name in ("tier2_steps", "groups_per_step", "position_cap", "tier3_iters",
                     "prompts_per_iter", "eval_every", "heldout", "bootstrap_B"):
            need(getattr(self, name) >= 1, name, "must be >= 1")
        need(0.0 < self.bootstrap_level < 1.0, "bootstrap_level", "must lie in (0, 1)")

    def to_dict(self) -> dict[str, Any]:
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v
                for f in fields(self)}

    def hash(self) -> str:
        """First 16 hex digits of the SHA-256 of the canonical JSON form."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def override(self, **changes: Any) -> "RunConfig":
        clean = {k: v for k, v in changes.items() if v is not None}
        unknown = set(clean) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown config field")
        return dataclasses.replace(self, **clean)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(name: str, raw: str) -> Any:
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if kind == "float | None":
            return None if raw.lower() in ("", "none", "null") else float(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "tuple[int, ...]":
            return tuple(int(x) for x in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{key}: unknown config field ({source}:{lineno})")
        values[key] = _parse_value(key, raw)
    return values


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then non-``None`` ``overrides``."""
    values: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"config file {p}: {exc.strerror or exc}") from None
        values.update(parse_config_text(text, str(p)))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown config field")
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"
