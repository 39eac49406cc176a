"""Group-relative advantages and the batch-mean dilution arithmetic."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_EPSILON = 1e-4


@dataclass(frozen=True)
class AdvantageVector:
    values: tuple[float, ...]
    group_mean: float
    group_std: float
    epsilon: float

    @property
    def all_zero(self) -> bool:
        return all(v == 0.0 for v in self.values)


@dataclass(frozen=True)
class BatchStats:
    n_items: int
    n_zero_advantage: int
    gradient_l2: float
    loss: float = 0.0

    @property
    def zero_fraction(self) -> float:
        return self.n_zero_advantage / self.n_items if self.n_items else float("nan")

    def to_dict(self) -> dict:
        return {
            "n_items": self.n_items,
            "n_zero_advantage": self.n_zero_advantage,
            "zero_fraction": self.zero_fraction,
            "gradient_l2": self.gradient_l2,
            "loss": self.loss,
        }


def advantages(rewards: Sequence[float], epsilon: float = DEFAULT_EPSILON) -> AdvantageVector:
    """Within-group z-scores ``(r_i - mean) / (std + epsilon)``, population std.

    A group whose rewards are all equal gets advantages of exactly ``0.0``
    rather than ``0 / epsilon``.
    """
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise ValueError(f"need at least 2 rewards, got {r.size}")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    mean = float(r.mean())
    std = float(np.sqrt(np.mean((r - mean) ** 2)))
    if np.all(r == r[0]):
        return AdvantageVector(tuple([0.0] * r.size), mean, 0.0, epsilon)
    a = (r - mean) / (std + epsilon)
    return AdvantageVector(tuple(float(x) for x in a), mean, std, epsilon)


def batch_loss(items: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Mean policy-gradient loss over ``(advantage, log-prob)`` items.

    Returns ``(loss, scale)`` where ``scale = N_nonzero / N`` is the factor by
    which zero-advantage items shrink the mean of the non-zero subset.
    """
    if not items:
        raise ValueError("empty batch")
    n = len(items)
    total = sum(a * lp for a, lp in items)
    nonzero = sum(1 for a, _ in items if a != 0.0)
    return -total / n, nonzero / n


def zero_advantage_fraction(adv: Sequence[float]) -> float:
    adv = list(adv)
    if not adv:
        raise ValueError("empty batch")
    return sum(1 for a in adv if a == 0.0) / len(adv)


def dilution_ratio(z_base: float, z_gated: float) -> float:
    """Predicted gated/baseline gradient-norm ratio from zero-advantage fractions."""
    for name, z in (("z_base", z_base), ("z_gated", z_gated)):
        if not 0.0 <= z < 1.0:
            raise ValueError(f"{name} must lie in [0, 1), got {z}")
    return (1.0 - z_gated) / (1.0 - z_base)


def l2_preservation(all_advantages: Sequence[float], kept_mask: Sequence[bool]) -> float:
    a = np.asarray(all_advantages, dtype=float)
    m = np.asarray(kept_mask, dtype=bool)
    if a.shape != m.shape:
        raise ValueError("mask and advantage vector differ in shape")
    full = float(np.linalg.norm(a))
    if full == 0.0:
        raise ZeroDivisionError("advantage vector has zero norm; preservation undefined")
    return float(np.linalg.norm(a[m])) / full
