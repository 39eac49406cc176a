"""Tabular softmax policy and a GRPO loop with dilution telemetry.

The policy is a logit table over ``(task type, step, object in view)`` states
and the ``n_locations + 1`` search actions. Handling-script steps are forced by
the environment and carry no log-probability. Gradients are exact, so the
batch-mean dilution identity can be checked to machine precision.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .core import GroupRecord, TrajectoryRecord, corpus_step_tokens
from .grpo import DEFAULT_EPSILON, BatchStats, advantages, dilution_ratio
from .simenv import (
    TASK_TYPES,
    GateSupervisorConfig,
    SearchWorld,
    derive_seed,
    policy_steps,
    rollout_group,
    supervised_rollout,
)

log = logging.getLogger(__name__)

TYPE_INDEX = {name: i for i, name in enumerate(TASK_TYPES)}


def type_home(task_type: str, n_locations: int = 12) -> int:
    return (5 * TYPE_INDEX[task_type] + 2) % n_locations


def softmax(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class TabularPolicy:
    """Softmax over a logit table; ``temperature == 0`` means greedy argmax.

    Rows are ``(task type, phase, object in view)`` with ``phase = min(t,
    n_phases - 1)``: the first ``n_phases - 1`` steps get their own rows and
    every later step shares one.
    """

    logits: np.ndarray
    n_locations: int = 12
    n_phases: int = 2
    temperature: float = 0.7

    def __post_init__(self) -> None:
        if self.n_phases < 1:
            raise ValueError("n_phases must be >= 1")
        want = (len(TASK_TYPES) * self.n_phases * 2, self.n_locations + 1)
        if self.logits.shape != want:
            raise ValueError(f"logit table shape {self.logits.shape}, expected {want}")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")

    @classmethod
    def init(cls, n_locations: int = 12, n_phases: int = 2, temperature: float = 0.7,
             take_bias: float = 2.0, home_bias: float = 0.0) -> "TabularPolicy":
        """Starting table: ``take`` favoured only with the object in view.

        ``home_bias`` adds a prior toward each task type's usual location,
        standing in for what a pretrained policy already knows.
        """
        logits = np.zeros((len(TASK_TYPES) * n_phases * 2, n_locations + 1))
        for i, task in enumerate(TASK_TYPES):
            rows = slice(i * n_phases * 2, (i + 1) * n_phases * 2)
            logits[rows, type_home(task, n_locations)] += home_bias
        logits[0::2, n_locations] = -take_bias
        logits[1::2, n_locations] = take_bias
        return cls(logits, n_locations, n_phases, temperature)

    def state(self, task_type: str, t: int, sees: bool) -> int:
        phase = min(t, self.n_phases - 1)
        return (TYPE_INDEX[task_type] * self.n_phases + phase) * 2 + int(sees)

    def probs(self, state: int) -> np.ndarray:
        row = self.logits[state]
        if self.temperature == 0:
            p = np.zeros_like(row)
            p[int(np.argmax(row))] = 1.0
            return p
        return softmax(row, self.temperature)

    def with_temperature(self, temperature: float) -> "TabularPolicy":
        return replace(self, temperature=temperature)

    def bind(self, world: SearchWorld, rng: np.random.Generator, t_max: int) -> "_BoundTabular":
        if world.n_locations != self.n_locations:
            raise ValueError("world does not fit the policy table")
        return _BoundTabular(self, world.task_type)


@dataclass(frozen=True)
class _BoundTabular:
    policy: TabularPolicy
    task_type: str

    def action_probs(self, t: int, sees: bool) -> np.ndarray:
        return self.policy.probs(self.policy.state(self.task_type, t, sees))


# Loss and gradient ----------------------------------------------------------


@dataclass(frozen=True)
class CompiledBatch:
    """Flat ``(state, action, weight)`` items; ``weight = A_i / N``."""

    states: np.ndarray
    actions: np.ndarray
    weights: np.ndarray
    n_traj: int
    n_zero_advantage: int

    @property
    def n_items(self) -> int:
        return int(self.states.size)


def _positions(traj: TrajectoryRecord, n_locations: int, cap: int | None,
               rng: np.random.Generator | None) -> list[tuple[int, bool, int]]:
    steps = list(policy_steps(traj, n_locations))
    if cap is None or len(steps) <= cap:
        return steps
    if rng is None:
        raise ValueError("a position cap needs an rng")
    keep = np.sort(rng.choice(len(steps), size=cap, replace=False))
    return [steps[i] for i in keep]


def compile_batch(
    groups: Sequence[GroupRecord],
    policy: TabularPolicy,
    epsilon: float = DEFAULT_EPSILON,
    position_cap: int | None = None,
    seed: int | None = None,
) -> CompiledBatch:
    """Advantage-weighted action items over every trajectory of ``groups``.

    With ``position_cap``, each trajectory keeps at most that many of its
    policy steps, chosen by a stream keyed on ``(seed, prompt_id)`` so two arms
    training on the same group see the same positions.
    """
    n_traj = sum(g.G for g in groups)
    states: list[int] = []
    actions: list[int] = []
    weights: list[float] = []
    n_zero = 0
    for g in groups:
        adv = advantages(g.rewards, epsilon).values
        n_zero += sum(1 for a in adv if a == 0.0)
        rng = None
        if position_cap is not None:
            rng = np.random.default_rng([seed or 0, *g.prompt_id.encode()])
        for traj, a in zip(g.trajectories, adv):
            for t, sees, act in _positions(traj, policy.n_locations, position_cap, rng):
                states.append(policy.state(g.task_type, t, sees))
                actions.append(act)
                weights.append(a / n_traj)
    return CompiledBatch(np.asarray(states, dtype=np.int64), np.asarray(actions, dtype=np.int64),
                         np.asarray(weights, dtype=float), n_traj, n_zero)


def batch_objective(logits: np.ndarray, batch: CompiledBatch, temperature: float) -> float:
    """``-(1/N) sum_i A_i sum_t log pi(a_t | s_t)``."""
    if batch.n_items == 0:
        return 0.0
    z = logits[batch.states] / temperature
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -float(np.sum(batch.weights * logp[np.arange(batch.n_items), batch.actions]))


def batch_gradient(logits: np.ndarray, batch: CompiledBatch, temperature: float) -> np.ndarray:
    """Exact gradient of ``batch_objective`` with respect to the logit table."""
    grad = np.zeros_like(logits)
    if batch.n_items == 0:
        return grad
    p = softmax(logits[batch.states], temperature)
    p[np.arange(batch.n_items), batch.actions] -= 1.0
    np.add.at(grad, batch.states, (batch.weights[:, None] * p) / temperature)
    return grad


def grpo_step(
    groups: Sequence[GroupRecord],
    policy: TabularPolicy,
    learning_rate: float,
    epsilon: float = DEFAULT_EPSILON,
    position_cap: int | None = None,
    seed: int | None = None,
) -> tuple[TabularPolicy, BatchStats, CompiledBatch | None]:
    """One plain gradient-descent step; an empty batch skips the update."""
    if not groups:
        log.info("empty batch after gate filtering; update skipped")
        return policy, BatchStats(0, 0, 0.0, 0.0), None
    temp = policy.temperature if policy.temperature > 0 else 1.0
    batch = compile_batch(groups, policy, epsilon, position_cap, seed)
    grad = batch_gradient(policy.logits, batch, temp)
    loss = batch_objective(policy.logits, batch, temp)
    stats = BatchStats(batch.n_traj, batch.n_zero_advantage, float(np.linalg.norm(grad)), loss)
    return replace(policy, logits=policy.logits - learning_rate * grad), stats, batch


# Telemetry ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainTelemetry:
    tier: int
    seed: int
    arm: str
    iteration: int
    n_groups: int
    cut_count: int
    zero_variance_count: int
    tp_cuts: int
    n_train_traj: int
    train_items: int
    zero_advantage_item_fraction: float | None
    gradient_l2: float
    mean_train_reward_over_uncut: float | None
    step_tokens: int
    cumulative_step_tokens: int
    heldout_success: float | None = None
    uncut_step_tokens: int | None = None
    matched_ratio: float | None = None
    skipped: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class DilutionCheck:
    z_base: float
    z_gated: float
    predicted: float
    measured: float

    @property
    def relative_error(self) -> float:
        return abs(self.measured - self.predicted) / self.predicted

    def to_dict(self) -> dict:
        return {**self.__dict__, "relative_error": self.relative_error}


def dilution_check(records: Iterable[TrainTelemetry]) -> DilutionCheck:
    """Measured gated/baseline mean gradient norm against the predicted ratio.

    Means run over every non-skipped update of each arm; the prediction uses
    the mean zero-advantage fractions of the same updates.
    """
    by_arm: dict[str, list[TrainTelemetry]] = {"baseline": [], "gated": []}
    for r in records:
        if r.arm in by_arm and not r.skipped:
            by_arm[r.arm].append(r)
    if not by_arm["baseline"] or not by_arm["gated"]:
        raise ValueError("need updates from both arms")
    z = {a: float(np.mean([r.zero_advantage_item_fraction for r in rs])) for a, rs in by_arm.items()}
    g = {a: float(np.mean([r.gradient_l2 for r in rs])) for a, rs in by_arm.items()}
    if g["baseline"] == 0.0:
        raise ZeroDivisionError("baseline arm has zero mean gradient norm")
    return DilutionCheck(z["baseline"], z["gated"], dilution_ratio(z["baseline"], z["gated"]),
                         g["gated"] / g["baseline"])


def _mean_reward(groups: Sequence[GroupRecord]) -> float | None:
    r = [x for g in groups for x in g.rewards]
    return float(np.mean(r)) if r else None


# Tier 2: fixed buffer --------------------------------------------------------


def run_tier2(
    buffer: Sequence[GroupRecord],
    steps: int = 20,
    groups_per_step: int = 4,
    K: int = 10,
    d_L: float = 0.12,
    learning_rate: float = 10.0,
    position_cap: int | None = 8,
    seed: int = 42,
    epsilon: float = DEFAULT_EPSILON,
    n_locations: int = 12,
    temperature: float = 0.7,
) -> list[TrainTelemetry]:
    """Both arms draw the same groups from a frozen buffer at every step.

    The gated arm drops groups whose recorded ``d_K`` falls below ``d_L``
    before forming its batch. ``matched_ratio`` is the gated arm's gradient
    norm over the norm of the unfiltered batch at the same parameters.
    """
    if not buffer:
        raise ValueError("empty buffer")
    rng = np.random.default_rng([seed, 5])
    pols = {"baseline": TabularPolicy.init(n_locations, temperature=temperature),
            "gated": TabularPolicy.init(n_locations, temperature=temperature)}
    cum = {"baseline": 0, "gated": 0}
    out: list[TrainTelemetry] = []
    for step in range(steps):
        idx = rng.choice(len(buffer), size=min(groups_per_step, len(buffer)), replace=False)
        groups = [buffer[i] for i in idx]
        cut = [g.divergence[K].d_K < d_L for g in groups]
        kept = [g for g, c in zip(groups, cut) if not c]
        pseed = derive_seed(seed, step)
        for arm in ("baseline", "gated"):
            batch = groups if arm == "baseline" else kept
            pol = pols[arm]
            new, stats, compiled = grpo_step(batch, pol, learning_rate, epsilon, position_cap, pseed)
            matched = None
            if arm == "gated" and stats.gradient_l2 > 0:
                full = compile_batch(groups, pol, epsilon, position_cap, pseed)
                full_norm = float(np.linalg.norm(batch_gradient(pol.logits, full, pol.temperature)))
                matched = stats.gradient_l2 / full_norm if full_norm > 0 else None
            pols[arm] = new
            tokens = corpus_step_tokens(batch)
            cum[arm] += tokens
            out.append(TrainTelemetry(
                tier=2, seed=seed, arm=arm, iteration=step, n_groups=len(groups),
                cut_count=sum(cut) if arm == "gated" else 0,
                zero_variance_count=sum(g.zero_variance for g in groups),
                tp_cuts=sum(1 for g, c in zip(groups, cut) if c and g.zero_variance) if arm == "gated" else 0,
                n_train_traj=stats.n_items,
                train_items=compiled.n_items if compiled else 0,
                zero_advantage_item_fraction=stats.zero_fraction if stats.n_items else None,
                gradient_l2=stats.gradient_l2,
                mean_train_reward_over_uncut=_mean_reward(batch),
                step_tokens=tokens, cumulative_step_tokens=cum[arm],
                matched_ratio=matched, skipped=compiled is None,
            ))
    return out


# Tier 3: on-policy loop ------------------------------------------------------


def draw_world(rng: np.random.Generator, n_locations: int = 12, home_prob: float = 0.7) -> SearchWorld:
    """Task type by the corpus mix; target at the type's usual spot with ``home_prob``."""
    task = TASK_TYPES[int(rng.integers(len(TASK_TYPES)))]
    if rng.random() < home_prob:
        target = type_home(task, n_locations)
    else:
        target = int(rng.integers(n_locations))
    return SearchWorld(target, task, n_locations)


def heldout_tasks(seed: int, n: int = 50, n_locations: int = 12) -> list[SearchWorld]:
    """Held-out instances come from their own seed stream, never from the training one."""
    return [draw_world(np.random.default_rng([seed, 9, i]), n_locations) for i in range(n)]


def greedy_success(policy: TabularPolicy, worlds: Sequence[SearchWorld], t_max: int = 30,
                   temperature: float = 0.0) -> float:
    """Held-out success rate, one episode per task; greedy by default."""
    evalpol = policy.with_temperature(temperature)
    wins = 0
    for i, w in enumerate(worlds):
        g = rollout_group(w, evalpol, G=2, T_max=t_max, seed=i, prompt_id=f"heldout-{i:04d}")
        wins += g.trajectories[0].reward == 1
    return wins / len(worlds)


@dataclass
class Tier3Result:
    records: list[TrainTelemetry] = field(default_factory=list)
    final_heldout: dict[tuple[int, str], float] = field(default_factory=dict)

    def check(self) -> DilutionCheck:
        return dilution_check(self.records)


def _with_counterfactual(g: GroupRecord, full: GroupRecord) -> GroupRecord:
    gate = replace(g.gate, counterfactual_label=full.label) if g.gate else None
    return replace(g, gate=gate)


def run_tier3(
    iters: int = 60,
    prompts_per_iter: int = 10,
    seeds: Sequence[int] = (7, 13, 23, 42),
    eval_every: int = 10,
    heldout: int = 50,
    G: int = 8,
    T_max: int = 30,
    K: int = 10,
    d_L: float = 0.12,
    learning_rate: float = 10.0,
    epsilon: float = DEFAULT_EPSILON,
    n_locations: int = 24,
    arms: Sequence[str] = ("baseline", "gated"),
    home_bias: float = 0.0,
    n_phases: int = 2,
    temperature: float = 0.7,
    eval_temperature: float = 0.0,
) -> Tier3Result:
    """Paired on-policy runs; cut groups leave the batch and are not replaced.

    Both arms of a seed draw the same prompts with the same per-trajectory
    streams. Each cut group is also rolled out in full from those streams to
    record its ground-truth label, which never enters training.
    """
    result = Tier3Result()
    gate_cfg = GateSupervisorConfig(K=K, d_L=d_L)
    for seed in seeds:
        hold = heldout_tasks(seed, heldout, n_locations)
        for arm in arms:
            pol = TabularPolicy.init(n_locations, n_phases, temperature, home_bias=home_bias)
            cum = 0
            for it in range(iters):
                ev = greedy_success(pol, hold, T_max, eval_temperature) if it % eval_every == 0 else None
                groups = []
                truth = []
                for j in range(prompts_per_iter):
                    wseed = derive_seed(seed, it, j)
                    world = draw_world(np.random.default_rng([wseed, 0]), n_locations)
                    pid = f"s{seed}-i{it:03d}-p{j:02d}"
                    full = rollout_group(world, pol, G, T_max, wseed, pid)
                    if arm == "gated":
                        g = supervised_rollout(world, pol, gate_cfg, G, T_max, wseed, pid)
                        if g.is_cut:
                            g = _with_counterfactual(g, full)
                    else:
                        g = full
                    groups.append(g)
                    truth.append(full)
                kept = [g for g in groups if not g.is_cut]
                pol, stats, compiled = grpo_step(kept, pol, learning_rate, epsilon)
                tokens = corpus_step_tokens(groups)
                cum += tokens
                cuts = [g.is_cut for g in groups]
                result.records.append(TrainTelemetry(
                    tier=3, seed=seed, arm=arm, iteration=it, n_groups=len(groups),
                    cut_count=sum(cuts),
                    zero_variance_count=sum(f.zero_variance for f in truth),
                    tp_cuts=sum(1 for c, f in zip(cuts, truth) if c and f.zero_variance),
                    n_train_traj=stats.n_items,
                    train_items=compiled.n_items if compiled else 0,
                    zero_advantage_item_fraction=stats.zero_fraction if stats.n_items else None,
                    gradient_l2=stats.gradient_l2,
                    mean_train_reward_over_uncut=_mean_reward(kept),
                    step_tokens=tokens, cumulative_step_tokens=cum,
                    heldout_success=ev, uncut_step_tokens=corpus_step_tokens(truth),
                    skipped=compiled is None,
                ))
            result.final_heldout[(seed, arm)] = greedy_success(pol, hold, T_max, eval_temperature)
    return result

