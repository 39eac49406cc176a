from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from selective_rollout.grpo import (
    advantages,
    batch_loss,
    dilution_ratio,
    l2_preservation,
    zero_advantage_fraction,
)


def test_known_vector():
    # mean 0.5, population std 0.5
    a = advantages([1, 0, 1, 0], epsilon=0.0)
    assert a.values == (1.0, -1.0, 1.0, -1.0)
    a = advantages([1, 0, 0, 0], epsilon=1e-4)
    assert a.values[0] == pytest.approx(0.75 / (np.sqrt(0.1875) + 1e-4))


@pytest.mark.parametrize("G", [2, 5, 8])
def test_zero_variance_exactly_zero(G):
    for r in (0, 1):
        assert advantages([r] * G).values == (0.0,) * G
        assert advantages([r] * G).all_zero


def test_all_binary_vectors_small():
    for bits in itertools.product((0, 1), repeat=6):
        a = np.array(advantages(bits, epsilon=0.0).values)
        if len(set(bits)) == 1:
            assert np.all(a == 0.0)
        else:
            assert abs(a.mean()) < 1e-12 and abs(a.std() - 1.0) < 1e-12


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=16))
def test_advantages_centered(rs):
    a = np.array(advantages(rs).values)
    assert abs(a.mean()) < 1e-9
    assert np.all(np.abs(a) <= len(rs))


def test_rejects():
    with pytest.raises(ValueError):
        advantages([1])
    with pytest.raises(ValueError):
        advantages([0, 1], epsilon=-1)
    with pytest.raises(ValueError):
        batch_loss([])


def test_batch_loss_and_scale():
    loss, scale = batch_loss([(1.0, -0.5), (-1.0, -1.5), (0.0, -2.0), (0.0, -3.0)])
    assert loss == pytest.approx(-(-0.5 + 1.5) / 4)
    assert scale == 0.5
    assert zero_advantage_fraction([0.0, 0.0, 1.0, -1.0]) == 0.5


def test_dilution_ratio():
    assert dilution_ratio(0.40, 0.28) == 1.2
    assert dilution_ratio(0.3, 0.3) == 1.0
    with pytest.raises(ValueError):
        dilution_ratio(1.0, 0.2)
    with pytest.raises(ValueError):
        dilution_ratio(0.2, -0.1)


def test_l2_preservation():
    a = [3.0, 4.0, 0.0]
    assert l2_preservation(a, [True, True, False]) == 1.0
    assert l2_preservation(a, [False, True, True]) == pytest.approx(0.8)
    with pytest.raises(ZeroDivisionError):
        l2_preservation([0.0, 0.0], [True, True])
    with pytest.raises(ValueError):
        l2_preservation(a, [True])
