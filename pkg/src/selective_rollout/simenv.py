"""Synthetic multi-turn search environment and group rollout supervisor.

The world hides one object at a target location. An agent visits locations
(``go_<i>``) and, once it sees the object, emits ``take``; a short
task-specific handling script then finishes the episode with reward 1. Running
out of steps gives reward 0.

Policies act through inverse-CDF sampling on one uniform draw per step from a
per-trajectory random stream, so two runs that share a seed and a policy
produce identical trajectories, and gating one group never perturbs another.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Protocol, Sequence

import numpy as np

from .core import GateDecision, GroupRecord, TrajectoryRecord
from .divergence import divergence_vector
from .gate import or_rule_gate

TASK_TYPES = (
    "pick_and_place_simple",
    "pick_two_obj_and_place",
    "pick_clean_then_place",
    "pick_heat_then_place",
    "pick_cool_then_place",
    "look_at_obj_in_light",
)
TASK_PROPORTIONS = (24, 20, 18, 11, 19, 8)

HANDLING = {
    "pick_and_place_simple": ("inspect", "lift", "go_dest", "open_dest", "put", "close_dest", "check"),
    "pick_two_obj_and_place": ("go_dest", "put", "find_second", "go_second", "take_second",
                               "go_dest", "open_dest", "put", "check"),
    "pick_clean_then_place": ("lift", "go_sink", "open_tap", "clean", "close_tap", "go_dest",
                              "open_dest", "put", "check"),
    "pick_heat_then_place": ("lift", "go_microwave", "open_microwave", "heat", "close_microwave",
                             "go_dest", "open_dest", "put", "check"),
    "pick_cool_then_place": ("lift", "go_fridge", "open_fridge", "cool", "close_fridge", "go_dest",
                             "open_dest", "put", "check"),
    "look_at_obj_in_light": ("inspect", "lift", "find_lamp", "go_lamp", "switch_lamp", "use_lamp",
                             "check"),
}

TAKE = "take"


def go(loc: int) -> str:
    return f"go_{loc}"


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed derived from a tuple of non-negative integers."""
    state = np.random.SeedSequence(list(parts)).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


@dataclass(frozen=True)
class SearchWorld:
    target_location: int
    task_type: str = TASK_TYPES[0]
    n_locations: int = 12
    decoy_prefix_length: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.target_location < self.n_locations:
            raise ValueError("target_location out of range")
        if self.task_type not in HANDLING:
            raise ValueError(f"unknown task type {self.task_type!r}")

    @property
    def handling(self) -> tuple[str, ...]:
        return HANDLING[self.task_type]

    @property
    def n_actions(self) -> int:
        return self.n_locations + 1

    def action_symbol(self, idx: int) -> str:
        return TAKE if idx == self.n_locations else go(idx)


def sees_object(observation: str | None) -> bool:
    return observation is not None and observation.endswith(":obj")


def policy_steps(traj: TrajectoryRecord, n_locations: int) -> Iterator[tuple[int, bool, int]]:
    """``(t, sees_object, action_index)`` for every policy-chosen step.

    Handling-script steps are environment-forced and are skipped.
    """
    prev_obs: str | None = None
    for t, (a, o) in enumerate(zip(traj.actions, traj.observations)):
        if a == TAKE:
            yield t, sees_object(prev_obs), n_locations
        elif a.startswith("go_") and a[3:].isdigit():
            yield t, sees_object(prev_obs), int(a[3:])
        prev_obs = o


class BoundPolicy(Protocol):
    def action_probs(self, t: int, sees: bool) -> np.ndarray: ...


class Policy(Protocol):
    def bind(self, world: SearchWorld, rng: np.random.Generator, t_max: int) -> BoundPolicy: ...


# Synthetic policy -----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticPolicy:
    """Group-level behaviour: a shared search plan plus per-step adherence.

    ``commitment`` is the per-step probability that a trajectory follows the
    group's shared plan instead of a uniformly random other location; ``skill``
    is the probability of emitting ``take`` when the object is in view. With
    ``loop_size`` > 0 the plan cycles over that many locations; a ``stuck`` loop
    leaves the target out, otherwise the target is one of them.
    """

    commitment: float
    skill: float
    loop_size: int = 0
    stuck: bool = False

    def __post_init__(self) -> None:
        if not (0.0 <= self.commitment <= 1.0 and 0.0 <= self.skill <= 1.0):
            raise ValueError("commitment and skill must lie in [0, 1]")
        if self.stuck and self.loop_size < 1:
            raise ValueError("a stuck plan needs loop_size >= 1")

    def plan(self, world: SearchWorld, rng: np.random.Generator, t_max: int) -> list[int]:
        n = world.n_locations
        others = [i for i in range(n) if i != world.target_location]
        if self.loop_size <= 0:
            cycle = [int(x) for x in rng.permutation(n)]
        elif self.stuck:
            cycle = [int(x) for x in rng.permutation(others)[: min(self.loop_size, n - 1)]]
        else:
            picked = [int(x) for x in rng.permutation(others)[: min(self.loop_size, n) - 1]]
            cycle = [int(x) for x in rng.permutation([world.target_location, *picked])]
        return [cycle[t % len(cycle)] for t in range(t_max)]

    def bind(self, world: SearchWorld, rng: np.random.Generator, t_max: int) -> "_PlanPolicy":
        return _PlanPolicy(world, self, self.plan(world, rng, t_max))


@dataclass
class _PlanPolicy:
    world: SearchWorld
    policy: SyntheticPolicy
    plan: list[int]

    def action_probs(self, t: int, sees: bool) -> np.ndarray:
        n = self.world.n_locations
        c = self.policy.commitment
        p = np.full(n + 1, (1.0 - c) / (n - 1))
        p[n] = 0.0
        p[self.plan[t]] = c
        if sees:
            p *= 1.0 - self.policy.skill
            p[n] = self.policy.skill
        return p


# Rollout engine ------------------------------------------------------------


@dataclass
class _Runner:
    world: SearchWorld
    rng: np.random.Generator
    t_max: int
    forced: Sequence[int] = ()
    actions: list[str] = field(default_factory=list)
    observations: list[str] = field(default_factory=list)
    handling_idx: int = -1
    done_at: int | None = None
    reward: int | None = None

    @property
    def running(self) -> bool:
        return self.done_at is None

    def step(self, policy: BoundPolicy) -> None:
        t = len(self.actions)
        u = self.rng.random()
        w = self.world
        if self.handling_idx >= 0:
            sym = w.handling[self.handling_idx]
            self.actions.append(sym)
            self.observations.append(f"{sym}:ok")
            self.handling_idx += 1
            if self.handling_idx == len(w.handling):
                self._finish(1)
        else:
            prev = self.observations[-1] if self.observations else None
            if t < len(self.forced):
                idx = self.forced[t]
            else:
                probs = policy.action_probs(t, sees_object(prev))
                idx = int(np.searchsorted(np.cumsum(probs), u * probs.sum(), side="right"))
                idx = min(idx, w.n_actions - 1)
            if idx == w.n_locations:
                self.actions.append(TAKE)
                if sees_object(prev):
                    self.observations.append("holding")
                    self.handling_idx = 0
                else:
                    self.observations.append("nothing")
            else:
                self.actions.append(go(idx))
                obj = ":obj" if idx == w.target_location else ""
                self.observations.append(f"at_{idx}{obj}")
        if self.running and len(self.actions) >= self.t_max:
            self._finish(0)

    def _finish(self, reward: int) -> None:
        self.done_at = len(self.actions)
        self.reward = reward

    def cut(self) -> None:
        if self.running:
            self.done_at = len(self.actions)
            self.reward = 0

    def record(self) -> TrajectoryRecord:
        return TrajectoryRecord(tuple(self.actions), tuple(self.observations),
                                self.done_at, self.reward)


@dataclass(frozen=True)
class GateSupervisorConfig:
    enabled: bool = True
    K: int = 10
    d_L: float = 0.12
    tau_H: float | None = None


def _partial_group(prompt_id: str, world: SearchWorld, t_max: int,
                   runners: Sequence[_Runner]) -> GroupRecord:
    trajs = [TrajectoryRecord(tuple(r.actions), tuple(r.observations), r.done_at, r.reward)
             for r in runners]
    return GroupRecord(prompt_id=prompt_id, task_type=world.task_type, T_max=t_max,
                       trajectories=tuple(trajs))


def _run(
    world: SearchWorld,
    bound: BoundPolicy,
    G: int,
    T_max: int,
    seed: int,
    prompt_id: str,
    gate: GateSupervisorConfig | None,
    forced: Sequence[Sequence[int]] | None = None,
) -> GroupRecord:
    runners = [
        _Runner(world, np.random.default_rng([seed, 2, i]), T_max,
                forced=forced[i] if forced is not None else ())
        for i in range(G)
    ]
    decision: GateDecision | None = None
    for t in range(1, T_max + 1):
        for r in runners:
            if r.running:
                r.step(bound)
        if gate is not None and gate.enabled and t == gate.K:
            dv = divergence_vector(_partial_group(prompt_id, world, T_max, runners), gate.K)
            if gate.tau_H is not None:
                fire, clause = or_rule_gate(dv.d_K, dv.tau_K, gate.d_L, gate.tau_H)
            else:
                fire = dv.d_K < gate.d_L
                clause = "d" if fire else "none"
            decision = GateDecision(cut=fire, clause=clause, K=gate.K, d_K=dv.d_K, tau_K=dv.tau_K)
            if fire:
                for r in runners:
                    r.cut()
                break
        gate_pending = gate is not None and gate.enabled and t < gate.K
        if not gate_pending and not any(r.running for r in runners):
            break
    trajs = tuple(r.record() for r in runners)
    return GroupRecord(
        prompt_id=prompt_id,
        task_type=world.task_type,
        T_max=T_max,
        trajectories=trajs,
        gate=decision,
        is_cut=bool(decision and decision.cut),
    )


def rollout_group(world: SearchWorld, policy: Policy, G: int = 8, T_max: int = 30,
                  seed: int = 0, prompt_id: str = "p0") -> GroupRecord:
    """Roll out ``G`` trajectories to completion with no gate."""
    bound = policy.bind(world, np.random.default_rng([seed, 1]), T_max)
    return _run(world, bound, G, T_max, seed, prompt_id, None)


def supervised_rollout(world: SearchWorld, policy: Policy, cfg: GateSupervisorConfig,
                       G: int = 8, T_max: int = 30, seed: int = 0,
                       prompt_id: str = "p0") -> GroupRecord:
    """Roll out a group, pausing after step ``cfg.K`` to evaluate the gate.

    When the gate fires every running trajectory stops at ``K`` with reward 0
    and the group is flagged ``is_cut``; trajectories that already finished keep
    their outcome.
    """
    if cfg.K >= T_max:
        raise ValueError("gate step K must be below T_max")
    bound = policy.bind(world, np.random.default_rng([seed, 1]), T_max)
    return _run(world, bound, G, T_max, seed, prompt_id, cfg)


@dataclass(frozen=True)
class _DecoyPolicy:
    """Wanders over non-target locations; used after an FP-mode prefix."""

    world: SearchWorld

    def action_probs(self, t: int, sees: bool) -> np.ndarray:
        n = self.world.n_locations
        p = np.full(n + 1, 1.0 / (n - 1))
        p[n] = 0.0
        p[self.world.target_location] = 0.0
        return p


def make_fp_mode_group(world: SearchWorld, G: int = 8, T_max: int = 30, seed: int = 0,
                       post_success_prob: float = 0.5, prompt_id: str = "fp0",
                       gate: GateSupervisorConfig | None = None) -> GroupRecord:
    """Group sharing a forced search prefix that then splits on outcome.

    Every trajectory replays the same ``decoy_prefix_length`` visits over
    non-target locations. Afterwards each one independently (probability
    ``post_success_prob``) heads straight for the object, or keeps wandering
    until the horizon.
    """
    L = world.decoy_prefix_length
    h = len(world.handling)
    if L < 1:
        raise ValueError("world needs decoy_prefix_length >= 1")
    if L + 2 + h > T_max:
        raise ValueError("decoy prefix leaves no room to succeed before T_max")
    shared = np.random.default_rng([seed, 1])
    others = [i for i in range(world.n_locations) if i != world.target_location]
    prefix = [int(others[i % len(others)]) for i in shared.permutation(len(others))]
    prefix = [prefix[t % len(prefix)] for t in range(L)]
    forced = []
    for i in range(G):
        coin = np.random.default_rng([seed, 3, i]).random()
        tail = [world.target_location, world.n_locations] if coin < post_success_prob else []
        forced.append(prefix + tail)
    return _run(world, _DecoyPolicy(world), G, T_max, seed, prompt_id, gate, forced=forced)


# Calibrated corpora ---------------------------------------------------------


@dataclass(frozen=True)
class Regime:
    weight: float
    commitment: tuple[float, float]
    skill: tuple[float, float]
    loop_size: int = 0
    stuck: bool = False


@dataclass(frozen=True)
class CalibrationPreset:
    """Mixture of group behaviours tuned to the target label priors."""

    regimes: tuple[Regime, ...]
    fp_fraction: float = 0.0
    decoy_prefix_length: int = 10

    def draw(self, rng: np.random.Generator) -> SyntheticPolicy:
        w = np.array([r.weight for r in self.regimes], dtype=float)
        reg = self.regimes[int(rng.choice(len(w), p=w / w.sum()))]
        return SyntheticPolicy(
            commitment=float(rng.uniform(*reg.commitment)),
            skill=float(rng.uniform(*reg.skill)),
            loop_size=reg.loop_size,
            stuck=reg.stuck,
        )


PRESETS: dict[str, CalibrationPreset] = {
    "alfworld": CalibrationPreset(
        regimes=(
            Regime(0.13, (0.93, 1.0), (0.85, 1.0), loop_size=5),             # confident
            Regime(0.15, (0.95, 1.0), (0.0, 0.3), loop_size=3, stuck=True),  # stuck loop
            Regime(0.72, (0.10, 0.80), (0.03, 0.45)),                        # exploring
        ),
        fp_fraction=0.015,
    ),
}


def _draw_task_type(rng: np.random.Generator) -> str:
    p = np.asarray(TASK_PROPORTIONS, dtype=float)
    return TASK_TYPES[int(rng.choice(len(p), p=p / p.sum()))]


def corpus_item(i: int, seed: int, preset: CalibrationPreset, n_locations: int = 12,
                T_max: int = 30) -> tuple[SearchWorld, SyntheticPolicy | None, int]:
    """World, policy (``None`` for an FP-mode group) and rollout seed of group ``i``."""
    gseed = derive_seed(seed, i)
    rng = np.random.default_rng([gseed, 0])
    task = _draw_task_type(rng)
    target = int(rng.integers(n_locations))
    if rng.random() < preset.fp_fraction:
        world = SearchWorld(target, task, n_locations, preset.decoy_prefix_length)
        return world, None, gseed
    return SearchWorld(target, task, n_locations), preset.draw(rng), gseed


def generate_corpus(
    n: int = 100,
    G: int = 8,
    T_max: int = 30,
    seed: int = 42,
    preset: str | CalibrationPreset = "alfworld",
    gate: GateSupervisorConfig | None = None,
    n_locations: int = 12,
) -> list[GroupRecord]:
    """Roll out ``n`` prompts; with a gate this is the gated arm of a paired A/B."""
    if isinstance(preset, str):
        preset = PRESETS[preset]
    out = []
    for i in range(n):
        world, policy, gseed = corpus_item(i, seed, preset, n_locations, T_max)
        pid = f"task-{i:04d}"
        if policy is None:
            g = make_fp_mode_group(world, G, T_max, gseed, prompt_id=pid, gate=gate)
        elif gate is not None:
            g = supervised_rollout(world, policy, gate, G, T_max, gseed, prompt_id=pid)
        else:
            g = rollout_group(world, policy, G, T_max, gseed, prompt_id=pid)
        out.append(g)
    return out
