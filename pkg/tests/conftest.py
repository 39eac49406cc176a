from __future__ import annotations

import pytest

from selective_rollout.core import GroupRecord, TrajectoryRecord
from selective_rollout.divergence import annotate_corpus
from selective_rollout.simenv import generate_corpus


def traj(actions, reward=None, done=True):
    actions = tuple(actions)
    obs = tuple(f"o_{a}" for a in actions)
    return TrajectoryRecord(actions, obs, len(actions) if done else None,
                            reward if done else None)


def group(action_lists, rewards, prompt_id="p", task_type="pick_and_place_simple", T_max=30):
    trajs = [traj(a, r) for a, r in zip(action_lists, rewards)]
    return GroupRecord(prompt_id, task_type, T_max, trajs)


@pytest.fixture(scope="session")
def corpus100():
    return annotate_corpus(generate_corpus(100, seed=42))
