"""Shared record types for rollout groups and their JSONL encoding.

A corpus is a list of :class:`GroupRecord`, one per prompt, each holding the
``G`` parallel trajectories sampled for that prompt. Records are frozen; the
pipeline stages (signals, gating) produce new records with ``dataclasses.replace``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

ALL_FAIL = "all_fail"
MIXED = "mixed"
ALL_SUCCEED = "all_succeed"
LABELS = (ALL_FAIL, MIXED, ALL_SUCCEED)

SIGNAL_NAMES = (
    "prefix_edit_distance_mean",
    "action_bigram_jaccard_mean",
    "unique_prefix_ratio",
    "unique_action_ratio",
    "action_entropy",
    "obs_unique_ratio",
    "termination_fraction",
)

CLAUSES = ("d", "tau", "low_tau", "random", "oracle", "none")


class RecordError(ValueError):
    """A record violates its schema or invariants."""


def _check_reward(r: Any) -> int:
    if isinstance(r, bool) or r not in (0, 1, 0.0, 1.0):
        raise RecordError(f"reward must be binary 0/1, got {r!r}")
    return int(r)


def group_label(rewards: Sequence[float]) -> str:
    """Three-way outcome label of a group of binary rewards."""
    if len(rewards) == 0:
        raise RecordError("empty reward vector")
    rs = [_check_reward(r) for r in rewards]
    if len(rs) < 2:
        raise RecordError(f"group needs at least 2 rewards, got {len(rs)}")
    total = sum(rs)
    if total == 0:
        return ALL_FAIL
    if total == len(rs):
        return ALL_SUCCEED
    return MIXED


def is_zero_variance(label: str) -> bool:
    return label != MIXED


@dataclass(frozen=True)
class TrajectoryRecord:
    """One rollout: aligned action/observation symbols plus its outcome.

    ``terminated_at`` is the step count at which the episode ended (success,
    horizon exhaustion, or a gate cut); ``None`` means it is still running.
    """

    actions: tuple[str, ...]
    observations: tuple[str, ...]
    terminated_at: int | None = None
    reward: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "observations", tuple(self.observations))
        if len(self.actions) != len(self.observations):
            raise RecordError("actions and observations differ in length")
        if self.terminated_at is not None and self.terminated_at != len(self.actions):
            raise RecordError(
                f"terminated_at={self.terminated_at} but {len(self.actions)} steps emitted"
            )
        if self.reward is not None:
            object.__setattr__(self, "reward", _check_reward(self.reward))
            if self.terminated_at is None:
                raise RecordError("reward set on a trajectory that has not terminated")

    @property
    def steps_emitted(self) -> int:
        return len(self.actions)

    def prefix(self, k: int) -> tuple[str, ...]:
        return self.actions[:k]

    def to_dict(self) -> dict[str, Any]:
        return {
            "actions": list(self.actions),
            "observations": list(self.observations),
            "steps_emitted": self.steps_emitted,
            "terminated_at": self.terminated_at,
            "reward": self.reward,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrajectoryRecord":
        rec = cls(
            actions=tuple(d["actions"]),
            observations=tuple(d["observations"]),
            terminated_at=d.get("terminated_at"),
            reward=d.get("reward"),
        )
        if "steps_emitted" in d and d["steps_emitted"] != rec.steps_emitted:
            raise RecordError("steps_emitted does not match the action array")
        return rec


@dataclass(frozen=True)
class DivergenceVector:
    """The seven in-group divergence signals measured at step ``K``."""

    K: int
    prefix_edit_distance_mean: float
    action_bigram_jaccard_mean: float
    unique_prefix_ratio: float
    unique_action_ratio: float
    action_entropy: float
    obs_unique_ratio: float
    termination_fraction: float

    @property
    def d_K(self) -> float:
        return self.prefix_edit_distance_mean

    @property
    def tau_K(self) -> float:
        return self.termination_fraction

    def get(self, name: str) -> float:
        if name not in SIGNAL_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def to_dict(self) -> dict[str, float]:
        return {"K": self.K, **{n: getattr(self, n) for n in SIGNAL_NAMES}}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DivergenceVector":
        return cls(K=int(d["K"]), **{n: float(d[n]) for n in SIGNAL_NAMES})


@dataclass(frozen=True)
class GateDecision:
    cut: bool
    clause: str
    K: int
    d_K: float | None = None
    tau_K: float | None = None
    counterfactual_label: str | None = None

    def __post_init__(self) -> None:
        if self.clause not in CLAUSES:
            raise RecordError(f"unknown gate clause {self.clause!r}")
        if (self.clause == "none") == self.cut:
            raise RecordError("clause must be 'none' exactly when the group is kept")

    def to_dict(self) -> dict[str, Any]:
        return {
            "cut": self.cut,
            "clause": self.clause,
            "K": self.K,
            "d_K": self.d_K,
            "tau_K": self.tau_K,
            "counterfactual_label": self.counterfactual_label,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "GateDecision":
        return cls(
            cut=bool(d["cut"]),
            clause=d["clause"],
            K=int(d["K"]),
            d_K=d.get("d_K"),
            tau_K=d.get("tau_K"),
            counterfactual_label=d.get("counterfactual_label"),
        )


@dataclass(frozen=True)
class GroupRecord:
    """The ``G`` trajectories rolled out for one prompt.

    ``rewards`` of a cut group are the truncated step-``K`` rewards; they are kept
    for logging only and the group never enters a gradient batch.
    """

    prompt_id: str
    task_type: str
    T_max: int
    trajectories: tuple[TrajectoryRecord, ...]
    divergence: Mapping[int, DivergenceVector] = field(default_factory=dict)
    gate: GateDecision | None = None
    is_cut: bool = False
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if len(self.trajectories) < 2:
            raise RecordError("a group needs at least 2 trajectories")
        for t in self.trajectories:
            if t.steps_emitted > self.T_max:
                raise RecordError(f"trajectory longer than T_max={self.T_max}")
        object.__setattr__(self, "divergence", dict(self.divergence))
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def G(self) -> int:
        return len(self.trajectories)

    @property
    def rewards(self) -> tuple[int, ...]:
        out = []
        for t in self.trajectories:
            if t.reward is None:
                raise RecordError(f"group {self.prompt_id} has an unfinished trajectory")
            out.append(t.reward)
        return tuple(out)

    @property
    def label(self) -> str:
        return group_label(self.rewards)

    @property
    def zero_variance(self) -> bool:
        return is_zero_variance(self.label)

    def prefixes(self, k: int) -> list[tuple[str, ...]]:
        return [t.prefix(k) for t in self.trajectories]

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "prompt_id": self.prompt_id,
            "task_type": self.task_type,
            "G": self.G,
            "T_max": self.T_max,
            "rewards": list(self.rewards),
            "label": self.label,
            "is_cut": self.is_cut,
            "trajectories": [t.to_dict() for t in self.trajectories],
        }
        if self.divergence:
            d["divergence"] = {str(k): v.to_dict() for k, v in sorted(self.divergence.items())}
        if self.gate is not None:
            d["gate"] = self.gate.to_dict()
        d.update(self.meta)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "GroupRecord":
        known = {
            "prompt_id", "task_type", "G", "T_max", "rewards", "label", "is_cut",
            "trajectories", "divergence", "gate",
        }
        try:
            trajs = tuple(TrajectoryRecord.from_dict(t) for t in d["trajectories"])
            rec = cls(
                prompt_id=str(d["prompt_id"]),
                task_type=str(d["task_type"]),
                T_max=int(d["T_max"]),
                trajectories=trajs,
                divergence={
                    int(k): DivergenceVector.from_dict(v)
                    for k, v in (d.get("divergence") or {}).items()
                },
                gate=GateDecision.from_dict(d["gate"]) if d.get("gate") else None,
                is_cut=bool(d.get("is_cut", False)),
                meta={k: v for k, v in d.items() if k not in known},
            )
        except KeyError as exc:
            raise RecordError(f"missing field {exc.args[0]!r}") from None
        if int(d.get("G", rec.G)) != rec.G:
            raise RecordError("G does not match the number of trajectories")
        if "rewards" in d and [_check_reward(r) for r in d["rewards"]] != list(rec.rewards):
            raise RecordError("rewards array disagrees with trajectory rewards")
        if "label" in d and d["label"] != rec.label:
            raise RecordError(f"label {d['label']!r} disagrees with rewards")
        return rec


def step_tokens(group: GroupRecord) -> int:
    """Total action steps emitted across the group's trajectories."""
    return sum(t.steps_emitted for t in group.trajectories)


def corpus_step_tokens(corpus: Iterable[GroupRecord]) -> int:
    return sum(step_tokens(g) for g in corpus)


def dumps_group(group: GroupRecord) -> str:
    return json.dumps(group.to_dict(), sort_keys=True, separators=(",", ":"))


def write_jsonl(path: str | Path, groups: Iterable[GroupRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in groups:
            fh.write(dumps_group(g))
            fh.write("\n")


def iter_jsonl(path: str | Path) -> Iterator[GroupRecord]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            try:
                yield GroupRecord.from_dict(obj)
            except RecordError as exc:
                raise RecordError(f"{path}:{lineno}: {exc}") from None


def read_jsonl(path: str | Path) -> list[GroupRecord]:
    return list(iter_jsonl(path))


def with_meta(group: GroupRecord, **meta: Any) -> GroupRecord:
    return replace(group, meta={**group.meta, **meta})
