"""Tests for the tabular policy, tasks and privileged-context assembly."""

import json

import numpy as np
import pytest

from src.antisd.grpo_advantage import GroupBatch
from src.antisd.policy_env import (
    ANS,
    BOS,
    CORRECT,
    EOS,
    FB,
    INCORRECT,
    NUM_SPECIAL_TOKENS,
    SOL,
    PrivilegedSource,
    TabularPolicy,
    Task,
    UnknownTokenError,
    build_privileged,
    pretrain,
    render_tokens,
    sample_rollout,
    split_answer,
)


@pytest.fixture
def task():
    """Default-sized keyed-recall task."""
    return Task(name="keyed_recall", vocab_size=16, seed=3)


@pytest.fixture
def problem(task):
    return task.problems("train")[0]


def _eos_policy(vocab_size=10):
    logits = np.full((vocab_size ** 2, vocab_size), -50.0)
    logits[:, EOS] = 50.0
    return TabularPolicy(vocab_size=vocab_size, context_order=2, logits=logits)


def test_fresh_policy_is_uniform():
    """Test zero logits give the uniform distribution everywhere."""
    policy = TabularPolicy(vocab_size=10, context_order=2)
    probs = policy.next_dist([BOS, 7, 8]).probs
    np.testing.assert_allclose(probs, np.full(10, 0.1), atol=1e-12)


def test_parameter_count():
    """Test the table has V^k * V entries."""
    assert TabularPolicy(vocab_size=16, context_order=2).parameter_count == 16 ** 2 * 16


def test_contexts_sharing_window_share_distribution():
    """Test next_dist depends only on the last k tokens."""
    rng = np.random.default_rng(1234)
    policy = TabularPolicy(vocab_size=10, context_order=2, logits=rng.normal(size=(100, 10)))
    for _ in range(50):
        tail = list(rng.integers(0, 10, size=2))
        a = list(rng.integers(0, 10, size=rng.integers(0, 5))) + tail
        b = list(rng.integers(0, 10, size=rng.integers(0, 5))) + tail
        np.testing.assert_array_equal(policy.next_dist(a).log_probs, policy.next_dist(b).log_probs)


def test_short_context_is_bos_padded():
    """Test a context shorter than k reads the BOS-padded window."""
    rng = np.random.default_rng(1234)
    policy = TabularPolicy(vocab_size=10, context_order=2, logits=rng.normal(size=(100, 10)))
    np.testing.assert_array_equal(policy.next_dist([7]).log_probs, policy.next_dist([BOS, 7]).log_probs)


def test_unknown_token_raises():
    """Test token ids outside the vocabulary are rejected."""
    policy = TabularPolicy(vocab_size=10)
    with pytest.raises(UnknownTokenError):
        policy.next_dist([BOS, 10])
    with pytest.raises(UnknownTokenError):
        policy.grad_log_prob([BOS], 12)


def test_grad_log_prob_at_uniform():
    """Test the score gradient on a uniform row is one-hot minus 1/V."""
    policy = TabularPolicy(vocab_size=10)
    grad = policy.grad_log_prob([BOS, 7], 8)
    expected = np.full(10, -0.1)
    expected[8] += 1.0
    np.testing.assert_allclose(grad.values, expected, atol=1e-15)
    assert grad.row == policy.window_index([BOS, 7])


def test_grad_log_prob_rows_sum_to_zero_and_match_fd():
    """Test row-sum zero and finite-difference agreement on random triples."""
    rng = np.random.default_rng(1234)
    for _ in range(100):
        policy = TabularPolicy(vocab_size=8, context_order=1, logits=rng.normal(0, 1.5, size=(8, 8)))
        context = [int(rng.integers(8))]
        token = int(rng.integers(8))
        grad = policy.grad_log_prob(context, token)
        assert abs(grad.values.sum()) <= 1e-12
        row = policy.logits[grad.row].copy()
        numeric = np.zeros(8)
        for j in range(8):
            bump = np.zeros(8)
            bump[j] = 1e-5
            up = row + bump
            down = row - bump
            numeric[j] = ((up[token] - np.logaddexp.reduce(up)) - (down[token] - np.logaddexp.reduce(down))) / 2e-5
        assert np.max(np.abs(numeric - grad.values)) <= 1e-6


def test_update_raises_probability_of_reinforced_token():
    """Test one ascent step along grad log pi(a) increases pi(a)."""
    policy = TabularPolicy(vocab_size=10)
    context = [BOS, 7]
    before = policy.next_dist(context).probs[9]
    grad = policy.grad_log_prob(context, 9)
    dense = np.zeros_like(policy.logits)
    dense[grad.row] = grad.values
    policy.apply_update(dense, 0.5)
    assert policy.next_dist(context).probs[9] > before
    assert policy.step == 1


def test_row_distribution_is_cached_until_update():
    """Test lookups share one read-only distribution until the next update replaces it."""
    policy = TabularPolicy(vocab_size=10)
    context = [BOS, 7]
    first = policy.next_dist(context)
    assert policy.next_dist([3, BOS, 7]) is first
    assert not first.probs.flags.writeable
    dense = np.zeros_like(policy.logits)
    dense[policy.window_index(context), 9] = 1.0
    policy.apply_update(dense, 0.5)
    second = policy.next_dist(context)
    assert second is not first
    assert second.probs[9] > first.probs[9]


def test_sample_rollout_stops_at_eos():
    """Test a policy with all mass on EOS emits [EOS] untruncated."""
    rollout, truncated = sample_rollout(_eos_policy(), [BOS, 7], 5, np.random.default_rng(0))
    assert rollout == [EOS]
    assert truncated is False


def test_sample_rollout_truncates():
    """Test max_len = 1 without EOS mass yields a truncated single token."""
    logits = np.zeros((100, 10))
    logits[:, EOS] = -1000.0
    policy = TabularPolicy(vocab_size=10, logits=logits)
    rollout, truncated = sample_rollout(policy, [BOS, 7], 1, np.random.default_rng(0))
    assert len(rollout) == 1
    assert rollout[0] != EOS
    assert truncated is True


def test_sample_rollout_is_deterministic():
    """Test the same seed gives the same rollout."""
    policy = TabularPolicy(vocab_size=12)
    first = sample_rollout(policy, [BOS, 8], 12, np.random.default_rng(42))
    second = sample_rollout(policy, [BOS, 8], 12, np.random.default_rng(42))
    assert first == second


def test_sample_rollout_rejects_zero_length():
    """Test max_len must be positive."""
    with pytest.raises(ValueError):
        sample_rollout(TabularPolicy(vocab_size=10), [BOS], 0, np.random.default_rng(0))


def test_split_answer():
    """Test answer segment extraction uses the last ANS before EOS."""
    assert split_answer([9, ANS, 7, 8, EOS]) == ((9,), (7, 8))
    assert split_answer([ANS, 9, ANS, 7, EOS]) == ((ANS, 9), (7,))
    assert split_answer([ANS, 7, 8]) is None
    assert split_answer([7, 8, EOS]) is None
    assert split_answer([]) is None


def test_verify(task, problem):
    """Test exact-match reward semantics."""
    solution = problem.solution
    assert task.verify(problem.prompt, (ANS,) + solution + (EOS,)) == 1
    assert task.verify(problem.prompt, ()) == 0
    perturbed = list(solution)
    perturbed[0] = NUM_SPECIAL_TOKENS + (perturbed[0] - NUM_SPECIAL_TOKENS + 1) % task.num_content_tokens
    assert task.verify(problem.prompt, (ANS,) + tuple(perturbed) + (EOS,)) == 0
    # Pure function
    assert task.verify(problem.prompt, problem.reference_rollout) == task.verify(problem.prompt, problem.reference_rollout)


def test_task_is_deterministic():
    """Test the same seed yields the same problem set and a different seed does not."""
    first = Task(seed=5)
    second = Task(seed=5)
    other = Task(seed=6)
    assert first.problems("train") == second.problems("train")
    assert first.problems("heldout") == second.problems("heldout")
    assert first.problems("train") != other.problems("train")


def test_task_splits_are_disjoint(task):
    """Test train and held-out prompts never overlap."""
    train = {p.prompt for p in task.problems("train")}
    heldout = {p.prompt for p in task.problems("heldout")}
    assert len(train) == 6 and len(heldout) == 3
    assert not train & heldout


def test_default_task_fits_two_token_window():
    """Test every default problem is emittable by a last-2 table while a last-1 table falls short."""
    task = Task()
    assert task.solvable_fraction(2) == 1.0
    assert task.solvable_fraction(1) < 1.0
    assert all(len(tokens) == 1 for tokens in task.reference_windows(2).values())


def test_long_keys_are_not_all_solvable():
    """Test two-token keys leave some answers unreachable from a window of two."""
    task = Task(key_length=2, num_train=12, num_heldout=4, seed=0)
    assert task.solvable_fraction(2) < 1.0


def test_answer_tokens_form_a_chain():
    """Test every answer token after the first depends only on the token before it."""
    task = Task(solution_length=4, seed=3)
    successors = {}
    for problem in task.all_problems():
        assert problem.solution[0] == task.solution_for(problem.prompt[1:])[0]
        for before, after in zip(problem.solution, problem.solution[1:]):
            assert successors.setdefault(before, after) == after
    assert len(task.all_problems()) == 9


def test_task_rejects_impossible_sizes():
    """Test asking for more problems than distinct keys fails."""
    with pytest.raises(ValueError):
        Task(vocab_size=9, key_length=1, num_train=3, num_heldout=0)
    with pytest.raises(ValueError):
        Task(name="unknown")


def test_task_json_round_trip(task):
    """Test a task serializes its problem set and rebuilds identically."""
    data = json.loads(task.to_json())
    assert len(data["problems"]["train"]) == 6
    rebuilt = Task.from_dict(data)
    assert rebuilt.problems("train") == task.problems("train")


def test_multi_root_accepts_any_root():
    """Test multi_root rewards every accepted root and rejects others."""
    task = Task(name="multi_root", vocab_size=16, num_train=6, num_heldout=2, num_roots=3, seed=1)
    problem = task.problems("train")[0]
    assert len(problem.roots) == 3
    for root in problem.roots:
        assert task.verify(problem.prompt, root + (ANS,) + problem.solution + (EOS,)) == 1
    unused = next(t for t in range(NUM_SPECIAL_TOKENS, 16) if (t,) not in problem.roots)
    assert task.verify(problem.prompt, (unused, ANS) + problem.solution + (EOS,)) == 0
    assert task.verify(problem.prompt, (ANS,) + problem.solution + (EOS,)) == 0


class TestBuildPrivileged:
    """Privileged-context selection rule."""

    def _group(self, problem, rewards):
        good = (ANS,) + problem.solution + (EOS,)
        bad = (ANS, EOS)
        rollouts = [good if r else bad for r in rewards]
        return GroupBatch(problem.problem_id, rollouts, [float(r) for r in rewards], [False] * len(rewards))

    def test_solution_from_group(self, task, problem):
        """Test a correct rollout in the group supplies the solution."""
        group = self._group(problem, [0, 1, 0, 0])
        context = build_privileged(group, task, problem, 0)
        assert context.source is PrivilegedSource.GROUP_ROLLOUT
        assert context.tokens == (SOL,) + problem.solution + (FB, INCORRECT)
        scored_correct = build_privileged(group, task, problem, 1)
        assert scored_correct.tokens[-1] == CORRECT

    def test_solution_from_dataset(self, task, problem):
        """Test an all-wrong group falls back to the dataset reference."""
        group = self._group(problem, [0, 0, 0, 0])
        context = build_privileged(group, task, problem, 2)
        assert context.source is PrivilegedSource.DATASET_REFERENCE
        assert context.solution == problem.solution

    def test_no_teacher_is_empty(self, task, problem):
        """Test the no-teacher ablation gets an empty context."""
        context = build_privileged(self._group(problem, [1, 0]), task, problem, 0, no_teacher=True)
        assert context.tokens == ()
        assert context.source is PrivilegedSource.NONE

    def test_never_returns_incorrect_solution(self, task, problem):
        """Test a rollout mislabelled as rewarded is not used as the solution."""
        bogus = GroupBatch(problem.problem_id, [(ANS, EOS), (ANS, EOS)], [1.0, 0.0], [False, False])
        context = build_privileged(bogus, task, problem, 0)
        assert context.source is PrivilegedSource.DATASET_REFERENCE
        assert context.solution == problem.solution


def test_pretrain_lowers_nll(task):
    """Test the warm start reduces the demonstration NLL and resets the step counter."""
    policy = TabularPolicy(vocab_size=16)
    first = pretrain(policy.copy(), task, 1, 0.1, 0.0, np.random.default_rng(0))
    later = pretrain(policy, task, 30, 0.1, 0.0, np.random.default_rng(0))
    assert later < first
    assert policy.step == 0


def test_render_tokens():
    """Test special tokens render by name."""
    assert render_tokens([BOS, 9, EOS]) == "<bos> 9 <eos>"


def test_pretrain_covers_heldout_prompts(task):
    """Test the warm start also teaches the first answer token of held-out prompts."""
    policy = TabularPolicy(vocab_size=16)
    pretrain(policy, task, 30, 0.1, 0.0, np.random.default_rng(0))
    for problem in task.problems("heldout"):
        assert policy.next_dist(problem.prompt + (ANS,)).probs[problem.solution[0]] > 0.25
