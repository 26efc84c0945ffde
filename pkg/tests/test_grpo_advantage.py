"""Tests for group-normalized advantages and composition."""

import numpy as np
import pytest

from src.antisd.core_math import LOG2
from src.antisd.grpo_advantage import ComposeMode, GroupBatch, compose, seq_advantage
from src.antisd.pmi_signal import SignalMode, delta


def test_seq_advantage_two_level():
    """Test the symmetric two-level case."""
    assert seq_advantage([1, 1, 0, 0]) == [1.0, 1.0, -1.0, -1.0]


def test_seq_advantage_degenerate_group():
    """Test a zero-variance group gets all-zero advantages."""
    assert seq_advantage([1, 1, 1, 1]) == [0.0, 0.0, 0.0, 0.0]
    assert seq_advantage([0.0, 0.0]) == [0.0, 0.0]


def test_seq_advantage_single_success():
    """Test the population-std normalization on one success in four."""
    np.testing.assert_allclose(
        seq_advantage([1, 0, 0, 0]),
        [1.7320508, -0.5773503, -0.5773503, -0.5773503],
        atol=1e-6,
    )


def test_seq_advantage_rejects_short_groups():
    """Test fewer than two rewards is an error."""
    with pytest.raises(ValueError):
        seq_advantage([1.0])


def test_seq_advantage_is_centered_and_scaled():
    """Test non-degenerate groups have mean 0 and population std 1."""
    rng = np.random.default_rng(1234)
    for _ in range(50):
        rewards = rng.integers(0, 2, size=8).astype(float)
        advantages = np.array(seq_advantage(rewards))
        if rewards.std() < 1e-8:
            assert np.all(advantages == 0.0)
        else:
            assert abs(advantages.mean()) <= 1e-12
            assert advantages.std() == pytest.approx(1.0, abs=1e-12)


def test_seq_advantage_ignores_reward_shift_and_scale():
    """Test an affine reward change with positive scale leaves the advantages unchanged."""
    rng = np.random.default_rng(1234)
    for _ in range(50):
        rewards = rng.normal(size=8)
        scale = float(rng.uniform(0.1, 10.0))
        shift = float(rng.normal(0.0, 5.0))
        np.testing.assert_allclose(
            seq_advantage(scale * rewards + shift), seq_advantage(rewards), rtol=0, atol=1e-9
        )
    assert seq_advantage([3.0, 3.0, 3.0]) == seq_advantage([-2.0, -2.0, -2.0]) == [0.0, 0.0, 0.0]


def test_compose_modes():
    """Test additive, multiplicative and token-only composition."""
    assert compose(1.0, 0.2, 0.5, ComposeMode.ADDITIVE) == pytest.approx(1.1)
    assert compose(0.0, 0.3, 0.5, ComposeMode.MULTIPLICATIVE) == 0.0
    assert compose(2.0, 0.3, 0.5, ComposeMode.MULTIPLICATIVE) == pytest.approx(2.3)
    assert compose(2.0, 0.3, 0.5, ComposeMode.TOKEN_ONLY) == pytest.approx(0.15)


@pytest.mark.parametrize("mode", [ComposeMode.ADDITIVE, ComposeMode.MULTIPLICATIVE])
def test_compose_zero_lambda_is_grpo(mode):
    """Test lambda = 0 returns the sequence advantage bit-for-bit."""
    for a_seq in (-1.3, 0.0, 0.7):
        for d in (-0.4, 0.0, 2.5):
            assert compose(a_seq, d, 0.0, mode) == a_seq


def test_group_batch_validation():
    """Test GroupBatch rejects inconsistent or too-small groups."""
    with pytest.raises(ValueError):
        GroupBatch(0, [(1,)], [1.0], [False])
    with pytest.raises(ValueError):
        GroupBatch(0, [(1,), (1,)], [1.0], [False, False])
    with pytest.raises(ValueError):
        GroupBatch(0, [(1,), (1,)], [1.0, float("nan")], [False, False])
    group = GroupBatch(0, [(1,), (2, 1)], [1.0, 0.0], [False, False])
    assert group.group_size == 2


def test_additive_jsd_ascent_bounds_the_raise():
    """Test jsd_ascent lifts a sequence advantage by at most lambda * log(2) / 2."""
    for lam in (0.1, 0.5, 1.0):
        bound = lam * 0.5 * LOG2
        for a_seq in (-1.7, 0.0, 0.9):
            for u in np.linspace(-60.0, 60.0, 241):
                raised = compose(a_seq, delta(float(u), SignalMode.JSD_ASCENT), lam, ComposeMode.ADDITIVE) - a_seq
                assert raised <= bound + 1e-12
        assert compose(0.0, delta(-60.0, SignalMode.JSD_ASCENT), lam, ComposeMode.ADDITIVE) == pytest.approx(bound)
