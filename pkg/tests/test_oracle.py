"""Tests for the exact-enumeration oracle and the finite-difference gradient checks."""

import json

import numpy as np
import pytest

from src.antisd.oracle import (
    IDENTITY_TOLERANCE,
    ExactJoint,
    JointPolicy,
    ZeroProbabilityError,
    enum_expectation,
    exact_pmi,
    fd_gradient_check,
    posterior,
    potential_increments,
    run_gradcheck,
    telescope_check,
)
from src.antisd.policy_env import TabularPolicy


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _case(rng, joint):
    x = int(rng.integers(joint.num_x))
    c = tuple(int(v) for v in rng.integers(joint.vocab_size, size=joint.c_len))
    y = tuple(int(v) for v in rng.integers(joint.vocab_size, size=joint.y_len))
    return x, c, y


def _random_policy(rng, vocab_size=6):
    return TabularPolicy(
        vocab_size=vocab_size, context_order=1, logits=rng.normal(0.0, 1.5, size=(vocab_size, vocab_size))
    )


class TestExactIdentities:
    """PMI identities on enumerated joints."""

    def test_token_pmi_equals_posterior_increment(self, rng):
        """Test both sides of the per-token identity agree on random joints."""
        for _ in range(100):
            joint = ExactJoint.random(rng)
            x, c, y = _case(rng, joint)
            for t in range(len(y)):
                token_side, posterior_side = exact_pmi(joint, x, c, y, t)
                assert abs(token_side - posterior_side) <= IDENTITY_TOLERANCE

    def test_telescoping(self, rng):
        """Test per-token terms sum to the sequence-level posterior change."""
        for _ in range(100):
            joint = ExactJoint.random(rng)
            summed, sequence_level = telescope_check(joint, *_case(rng, joint))
            assert abs(summed - sequence_level) <= IDENTITY_TOLERANCE

    def test_potential_increments(self, rng):
        """Test the potential differences reproduce every per-token term."""
        for _ in range(50):
            joint = ExactJoint.random(rng)
            x, c, y = _case(rng, joint)
            increments = potential_increments(joint, x, c, y)
            for t, increment in enumerate(increments):
                assert abs(increment - exact_pmi(joint, x, c, y, t)[0]) <= IDENTITY_TOLERANCE

    def test_independent_joint_gives_zero(self, rng):
        """Test u is zero everywhere when c is independent of y."""
        joint = ExactJoint.independent(rng)
        for _ in range(20):
            x, c, y = _case(rng, joint)
            for t in range(len(y)):
                assert abs(exact_pmi(joint, x, c, y, t)[0]) <= IDENTITY_TOLERANCE

    def test_single_token_rollout(self, rng):
        """Test with one token the sum equals the full posterior change."""
        joint = ExactJoint.random(rng, y_len=1)
        x, c, y = _case(rng, joint)
        token_side, _ = exact_pmi(joint, x, c, y, 0)
        assert abs(token_side - (posterior(joint, x, c, y) - posterior(joint, x, c, ()))) <= IDENTITY_TOLERANCE

    def test_deterministic_joint_reaches_certainty(self, rng):
        """Test when c = g(y) the summed terms equal -log P(c|x) on consistent rollouts."""
        joint = ExactJoint.deterministic(rng)
        table = joint.weights[0]
        checked = 0
        for y_index in range(table.shape[1]):
            c_index = int(np.argmax(table[:, y_index]))
            try:
                c_prior = posterior(joint, 0, _digits(c_index, joint.vocab_size, joint.c_len), ())
            except ZeroProbabilityError:
                continue
            y = _digits(y_index, joint.vocab_size, joint.y_len)
            c = _digits(c_index, joint.vocab_size, joint.c_len)
            summed, _ = telescope_check(joint, 0, c, y)
            assert abs(summed + c_prior) <= IDENTITY_TOLERANCE
            checked += 1
        assert checked > 0

    def test_zero_probability_is_reported(self, rng):
        """Test conditioning on an impossible c raises ZeroProbabilityError."""
        joint = ExactJoint.deterministic(rng)
        column = joint.weights[0][:, 0]
        impossible = int(np.flatnonzero(column == 0)[0])
        with pytest.raises(ZeroProbabilityError):
            posterior(joint, 0, _digits(impossible, joint.vocab_size, joint.c_len), _digits(0, joint.vocab_size, joint.y_len))

    def test_position_out_of_range(self, rng):
        """Test exact_pmi rejects positions past the rollout."""
        joint = ExactJoint.random(rng)
        x, c, y = _case(rng, joint)
        with pytest.raises(ValueError):
            exact_pmi(joint, x, c, y, len(y))

    def test_joint_validation(self):
        """Test negative weights and mismatched normalizers are refused."""
        weights = np.ones((1, 4, 8))
        with pytest.raises(ValueError):
            ExactJoint(-weights, -weights.sum(axis=(1, 2)), 2, 2, 3)
        with pytest.raises(ValueError):
            ExactJoint(weights, np.array([1.0]), 2, 2, 3)
        with pytest.raises(ValueError):
            ExactJoint(weights, weights.sum(axis=(1, 2)), 3, 2, 3)


def _digits(index, base, length):
    digits = []
    for _ in range(length):
        digits.append(index % base)
        index //= base
    return tuple(reversed(digits))


def test_joint_policy_distributions_are_normalized(rng):
    """Test the adapter returns proper next-token distributions."""
    joint = ExactJoint.random(rng)
    adapter = JointPolicy(joint)
    x, c, y = _case(rng, joint)
    for context in (adapter.prompt(x), adapter.prompt(x) + adapter.privileged(c) + y[:2]):
        assert np.exp(adapter.next_dist(context).log_probs).sum() == pytest.approx(1.0, abs=1e-12)


class TestGradientChecks:
    """Score-function estimators against finite differences."""

    @pytest.mark.parametrize("divergence", ["reverse_kl", "jsd"])
    def test_estimator_matches_finite_difference(self, rng, divergence):
        """Test 100 random instances per divergence."""
        for _ in range(100):
            policy = _random_policy(rng)
            context = (int(rng.integers(6)),)
            teacher_context = (int(rng.integers(6)),)
            result = fd_gradient_check(policy, context, divergence, teacher_context)
            assert result.passed, f"rel {result.max_rel_error:.3e}, abs {result.max_abs_error:.3e}"

    @pytest.mark.parametrize("divergence", ["reverse_kl", "jsd"])
    def test_gradient_vanishes_at_equality(self, rng, divergence):
        """Test teacher == student gives a zero estimator."""
        policy = _random_policy(rng)
        result = fd_gradient_check(policy, (2,), divergence)
        assert np.max(np.abs(result.estimator)) <= 1e-12

    def test_unknown_divergence(self, rng):
        """Test an unsupported divergence name raises."""
        with pytest.raises(ValueError):
            fd_gradient_check(_random_policy(rng), (0,), "forward_kl")

    def test_teacher_is_not_perturbed(self, rng):
        """Test the check leaves the policy logits untouched."""
        policy = _random_policy(rng)
        before = policy.logits.copy()
        fd_gradient_check(policy, (1,), "jsd", (1,))
        np.testing.assert_array_equal(policy.logits, before)


def test_enum_expectation(rng):
    """Test constant weights give 1 and the score function has zero mean."""
    policy = _random_policy(rng)
    context = (3,)
    assert enum_expectation(policy, context, lambda v: 1.0) == pytest.approx(1.0, abs=1e-12)
    score_mean = enum_expectation(policy, context, lambda v: policy.grad_log_prob(context, v).values)
    assert np.max(np.abs(score_mean)) <= 1e-12


def test_run_gradcheck_passes():
    """Test the full oracle suite passes with a few trials and serializes."""
    report = run_gradcheck(trials=3, seed=1234)
    assert report.passed, report.failures
    names = [check.name for check in report.checks]
    assert "jsd_gradient" in names and "telescoping" in names
    data = json.loads(report.to_json())
    assert data["passed"] is True
    assert data["trials"] == 3


def test_run_gradcheck_rejects_zero_trials():
    """Test trials must be positive."""
    with pytest.raises(ValueError):
        run_gradcheck(trials=0)
