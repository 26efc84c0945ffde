"""Tests for gate calibration, the Schmitt-trigger transitions and the entropy median."""

import numpy as np
import pytest

from src.antisd.entropy_gate import (
    GateNotCalibratedError,
    GateSignal,
    GateState,
    batch_entropy_median,
    calibrate,
    gate_step,
)
from src.antisd.pmi_signal import TokenScore


@pytest.fixture
def gate():
    """Gate calibrated to h_warm = 0.40, tau_down = 0.372."""
    return calibrate([0.4, 0.42, 0.38, 0.41, 0.40], multiplier=0.93, lambda_max=0.5)


def _scores(entropies, student=None):
    student = student or entropies
    return [[
        TokenScore(s=-1.0, t=-1.0, u=0.0, teacher_entropy=h, position=i, student_entropy=sh)
        for i, (h, sh) in enumerate(zip(entropies, student))
    ]]


def test_calibrate_values(gate):
    """Test h_warm is the median of medians and tau_down = 0.93 h_warm."""
    assert gate.h_warm == 0.4
    assert gate.tau_down == 0.93 * gate.h_warm
    assert gate.tau_down == pytest.approx(0.372)
    assert gate.g == 1
    assert gate.calibrated


def test_calibrate_single_entry():
    """Test a one-step warmup."""
    state = calibrate([1.0], multiplier=0.5)
    assert state.h_warm == 1.0
    assert state.tau_down == 0.5


@pytest.mark.parametrize("multiplier", [0.90, 0.95])
def test_calibrate_threshold_variants(multiplier):
    """Test the alternative multipliers are accepted."""
    assert calibrate([0.5], multiplier=multiplier).tau_down == multiplier * 0.5


def test_calibrate_errors():
    """Test empty warmups and out-of-range multipliers are rejected."""
    with pytest.raises(ValueError):
        calibrate([])
    with pytest.raises(ValueError):
        calibrate([0.4], multiplier=1.0)
    with pytest.raises(ValueError):
        calibrate([0.4], multiplier=0.0)


def test_calibration_ignores_warmup_order():
    """Test shuffling the warmup medians gives the same thresholds."""
    rng = np.random.default_rng(1234)
    for size in (6, 7):
        medians = rng.uniform(0.1, 2.0, size=size).tolist()
        reference = calibrate(medians)
        for _ in range(20):
            shuffled = calibrate(rng.permutation(medians).tolist())
            assert (shuffled.h_warm, shuffled.tau_down) == (reference.h_warm, reference.tau_down)


def test_gate_transitions(gate):
    """Test every case of the transition table."""
    # open, above tau_down: stays open
    state, lam = gate_step(gate, 0.38)
    assert (state.g, lam) == (1, 0.5)
    # open, below tau_down: closes
    closed, lam = gate_step(gate, 0.36)
    assert (closed.g, lam) == (0, 0.0)
    # closed, below h_warm: stays closed
    state, lam = gate_step(closed, 0.39)
    assert (state.g, lam) == (0, 0.0)
    # closed, at h_warm: reopens
    state, lam = gate_step(closed, 0.40)
    assert (state.g, lam) == (1, 0.5)
    # open, exactly tau_down: stays open
    state, _ = gate_step(gate, gate.tau_down)
    assert state.g == 1
    # closed, far below: stays closed
    state, _ = gate_step(closed, 0.0)
    assert state.g == 0


def test_gate_does_not_chatter(gate):
    """Test 1000 oscillations inside (tau_down, h_warm) never change state."""
    rng = np.random.default_rng(1234)
    for start in (gate, gate_step(gate, 0.1)[0]):
        state = start
        changes = 0
        for h in rng.uniform(gate.tau_down + 1e-6, gate.h_warm - 1e-6, size=1000):
            new_state, _ = gate_step(state, float(h))
            changes += int(new_state.g != state.g)
            state = new_state
        assert changes == 0


def test_closed_gate_waits_for_h_warm(gate):
    """Test a closed gate stays at lambda 0 for any entropy below h_warm and reopens only at h_warm."""
    rng = np.random.default_rng(1234)
    state, _ = gate_step(gate, 0.1)
    for h in rng.uniform(0.0, gate.h_warm, size=500):
        state, lam = gate_step(state, float(h))
        assert (state.g, lam) == (0, 0.0)
    state, lam = gate_step(state, gate.h_warm)
    assert (state.g, lam) == (1, 0.5)
    for h in rng.uniform(gate.tau_down, 3.0, size=500):
        state, lam = gate_step(state, float(h))
        assert (state.g, lam) == (1, 0.5)


def test_uncalibrated_gate_raises():
    """Test stepping before calibration fails."""
    with pytest.raises(GateNotCalibratedError):
        gate_step(GateState(), 0.3)


def test_gate_rejects_bad_entropy(gate):
    """Test negative or non-finite entropies are rejected."""
    with pytest.raises(ValueError):
        gate_step(gate, -0.1)
    with pytest.raises(ValueError):
        gate_step(gate, float("nan"))


def test_disabled_gate_returns_lambda_max(gate):
    """Test the no-gate ablation keeps lambda at lambda_max and leaves g alone."""
    disabled = calibrate([0.4], lambda_max=0.5, enabled=False)
    state, lam = gate_step(disabled, 0.0)
    assert lam == 0.5
    assert state.g == disabled.g


def test_forced_closed_gate_returns_zero():
    """Test a forced-closed gate always returns lambda 0."""
    forced = calibrate([0.4], lambda_max=0.5, forced_closed=True)
    for h in (0.0, 0.4, 5.0):
        state, lam = gate_step(forced, h)
        assert lam == 0.0
        assert state.g == 0


def test_batch_entropy_median():
    """Test odd counts, the even-count midpoint and the constant case."""
    assert batch_entropy_median(_scores([0.1, 0.5, 0.9])) == 0.5
    assert batch_entropy_median(_scores([0.2, 0.4, 0.6, 0.8])) == pytest.approx(0.5)
    assert batch_entropy_median(_scores([0.7] * 5)) == 0.7


def test_batch_entropy_median_pools_rollouts():
    """Test the median pools tokens across rollouts."""
    scores = _scores([0.1]) + _scores([0.5, 0.9])
    assert batch_entropy_median(scores) == 0.5


def test_batch_entropy_median_student_source():
    """Test the student-entropy signal reads the student column."""
    scores = _scores([0.1, 0.2, 0.3], student=[1.0, 2.0, 3.0])
    assert batch_entropy_median(scores, GateSignal.STUDENT_ENTROPY) == 2.0


def test_batch_entropy_median_empty():
    """Test an empty batch is an error."""
    with pytest.raises(ValueError):
        batch_entropy_median([])
    with pytest.raises(ValueError):
        batch_entropy_median([[]])


def test_gate_state_round_trip(gate):
    """Test GateState survives to_dict/from_dict."""
    stepped, _ = gate_step(gate, 0.36)
    assert GateState.from_dict(stepped.to_dict()) == stepped
    assert GateState.from_dict(gate.to_dict()).h_warm == gate.h_warm
