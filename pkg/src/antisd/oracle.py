"""
Brute-force verifiers for the identities the training signal rests on.

Everything here enumerates: exact joints over tiny alphabets for the PMI and
telescoping identities, full-vocabulary expectations and central finite
differences for the gradient estimators.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .core_math import LOG2, Categorical, fprime_jsd, log_softmax, phi
from .pmi_signal import score_rollout
from .policy_env import TabularPolicy

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
FD_RELATIVE_TOLERANCE = 1e-5
FD_ABSOLUTE_FLOOR = 1e-9
IDENTITY_TOLERANCE = 1e-10

# Separates the x token from the conditioning tokens c in a JointPolicy context.
JOINT_MARKER = -1


class ZeroProbabilityError(ValueError):
    """Raised when an identity would condition on a zero-probability event."""


@dataclass
class ExactJoint:
    """
    Enumerated joint P(c, y | x) over a tiny alphabet.

    ``weights[x]`` has shape (V**c_len, V**y_len), unnormalized; the
    conditional table for x is weights[x] / normalizer[x].
    """

    weights: np.ndarray
    normalizer: np.ndarray
    vocab_size: int
    c_len: int
    y_len: int

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.normalizer = np.asarray(self.normalizer, dtype=np.float64)
        expected = (self.vocab_size ** self.c_len, self.vocab_size ** self.y_len)
        if self.weights.ndim != 3 or self.weights.shape[1:] != expected:
            raise ValueError(f"weights must have shape (num_x, {expected[0]}, {expected[1]})")
        if np.any(self.weights < 0):
            raise ValueError("Joint weights must be nonnegative")
        sums = self.weights.sum(axis=(1, 2))
        if not np.allclose(sums, self.normalizer, rtol=1e-12, atol=0.0):
            raise ValueError("normalizer does not match the entry sums")

    @property
    def num_x(self) -> int:
        return int(self.weights.shape[0])

    @property
    def is_positive(self) -> bool:
        return bool(np.all(self.weights > 0))

    @classmethod
    def _from_weights(cls, weights: np.ndarray, vocab_size: int, c_len: int, y_len: int) -> "ExactJoint":
        return cls(weights, weights.sum(axis=(1, 2)), vocab_size, c_len, y_len)

    @classmethod
    def random(
        cls,
        rng: np.random.Generator,
        vocab_size: int = 3,
        c_len: int = 2,
        y_len: int = 3,
        num_x: int = 2,
    ) -> "ExactJoint":
        """Strictly positive joint from exponentiated uniform noise."""
        shape = (num_x, vocab_size ** c_len, vocab_size ** y_len)
        return cls._from_weights(np.exp(rng.uniform(-2.0, 2.0, size=shape)), vocab_size, c_len, y_len)

    @classmethod
    def independent(
        cls,
        rng: np.random.Generator,
        vocab_size: int = 3,
        c_len: int = 2,
        y_len: int = 3,
        num_x: int = 2,
    ) -> "ExactJoint":
        """Product joint P(c|x) P(y|x)."""
        pc = np.exp(rng.uniform(-2.0, 2.0, size=(num_x, vocab_size ** c_len, 1)))
        py = np.exp(rng.uniform(-2.0, 2.0, size=(num_x, 1, vocab_size ** y_len)))
        return cls._from_weights(pc * py, vocab_size, c_len, y_len)

    @classmethod
    def deterministic(
        cls,
        rng: np.random.Generator,
        vocab_size: int = 3,
        c_len: int = 2,
        y_len: int = 3,
        num_x: int = 1,
    ) -> "ExactJoint":
        """Joint where c = g(y) for a random map g; not strictly positive."""
        num_c = vocab_size ** c_len
        num_y = vocab_size ** y_len
        weights = np.zeros((num_x, num_c, num_y))
        for x in range(num_x):
            mapping = rng.integers(0, num_c, size=num_y)
            weights[x, mapping, np.arange(num_y)] = np.exp(rng.uniform(-2.0, 2.0, size=num_y))
        return cls._from_weights(weights, vocab_size, c_len, y_len)

    def index(self, tokens: Sequence[int]) -> int:
        value = 0
        for token in tokens:
            if not 0 <= token < self.vocab_size:
                raise ValueError(f"Token {token} outside the joint's alphabet")
            value = value * self.vocab_size + int(token)
        return value

    def prefix_table(self, x: int, length: int) -> np.ndarray:
        """P(c, y_1..y_length | x), shape (V**c_len,) + (V,) * length."""
        if not 0 <= length <= self.y_len:
            raise ValueError(f"Prefix length {length} outside [0, {self.y_len}]")
        table = self.weights[x] / self.normalizer[x]
        table = table.reshape((table.shape[0],) + (self.vocab_size,) * self.y_len)
        axes = tuple(range(1 + length, 1 + self.y_len))
        return table.sum(axis=axes) if axes else table


def posterior(joint: ExactJoint, x: int, c: Sequence[int], prefix: Sequence[int]) -> float:
    """log P(c | x, prefix), enumerated over c."""
    table = joint.prefix_table(x, len(prefix))
    column = table[(slice(None),) + tuple(int(v) for v in prefix)]
    total = column.sum()
    if total <= 0:
        raise ZeroProbabilityError(f"P(prefix={tuple(prefix)} | x={x}) is zero")
    value = column[joint.index(c)]
    if value <= 0:
        raise ZeroProbabilityError(f"P(c={tuple(c)} | x={x}, prefix={tuple(prefix)}) is zero")
    return math.log(value / total)


def _token_conditional(table: np.ndarray, prefix: Tuple[int, ...], c_index: Optional[int]) -> np.ndarray:
    if c_index is None:
        slice_ = table[(slice(None),) + prefix].sum(axis=0)
    else:
        slice_ = table[(c_index,) + prefix]
    total = slice_.sum()
    if total <= 0:
        raise ZeroProbabilityError(f"Conditioning prefix {prefix} has zero probability")
    return slice_ / total


def exact_pmi(joint: ExactJoint, x: int, c: Sequence[int], y: Sequence[int], t: int) -> Tuple[float, float]:
    """
    Both sides of the per-token PMI identity at position t (0-based).

    Returns:
        Tuple of (log P(y_t|x,c,y_<t) - log P(y_t|x,y_<t),
                  log P(c|x,y_<=t) - log P(c|x,y_<t))
    """
    if not 0 <= t < len(y):
        raise ValueError(f"Position {t} outside a rollout of length {len(y)}")
    prefix = tuple(int(v) for v in y[:t])
    token = int(y[t])
    table = joint.prefix_table(x, t + 1)
    ci = joint.index(c)

    with_c = _token_conditional(table, prefix, ci)
    without_c = _token_conditional(table, prefix, None)
    if with_c[token] <= 0 or without_c[token] <= 0:
        raise ZeroProbabilityError(f"Token {token} has zero probability at position {t}")
    token_side = math.log(with_c[token]) - math.log(without_c[token])

    posterior_side = posterior(joint, x, c, y[: t + 1]) - posterior(joint, x, c, y[:t])
    return token_side, posterior_side


def telescope_check(joint: ExactJoint, x: int, c: Sequence[int], y: Sequence[int]) -> Tuple[float, float]:
    """
    Returns:
        Tuple of (sum of per-token u, log P(c|x,y) - log P(c|x))
    """
    total = sum(exact_pmi(joint, x, c, y, t)[0] for t in range(len(y)))
    return total, posterior(joint, x, c, y) - posterior(joint, x, c, ())


def potential_increments(joint: ExactJoint, x: int, c: Sequence[int], y: Sequence[int]) -> List[float]:
    """Successive differences of the potential log P(c | x, y_<=t)."""
    potentials = [posterior(joint, x, c, y[:t]) for t in range(len(y) + 1)]
    return [after - before for before, after in zip(potentials, potentials[1:])]


class JointPolicy:
    """
    Presents an ExactJoint through the next_dist interface.

    Context layout: (x,) for the bare context, (x, JOINT_MARKER) + c for the
    enriched one, each followed by the rollout prefix.
    """

    def __init__(self, joint: ExactJoint):
        self.joint = joint
        self.max_context_length = 2 + joint.c_len + joint.y_len

    def next_dist(self, context: Sequence[int]) -> Categorical:
        x = int(context[0])
        rest = tuple(int(v) for v in context[1:])
        c_index = None
        if rest and rest[0] == JOINT_MARKER:
            c_index = self.joint.index(rest[1: 1 + self.joint.c_len])
            rest = rest[1 + self.joint.c_len:]
        table = self.joint.prefix_table(x, len(rest) + 1)
        return Categorical.from_probs(_token_conditional(table, rest, c_index))

    @staticmethod
    def prompt(x: int) -> Tuple[int, ...]:
        return (x,)

    @staticmethod
    def privileged(c: Sequence[int]) -> Tuple[int, ...]:
        return (JOINT_MARKER,) + tuple(int(v) for v in c)


def enum_expectation(policy, context: Sequence[int], weight: Callable[[int], object]):
    """Sum over the full vocabulary of pi(v | context) * weight(v)."""
    dist = policy.next_dist(context)
    probs = dist.probs
    total = None
    for token in range(dist.vocab_size):
        term = probs[token] * np.asarray(weight(token), dtype=np.float64)
        total = term if total is None else total + term
    return total


@dataclass
class FDResult:
    """Estimator gradient against the central finite-difference gradient on one logit row."""

    max_rel_error: float
    max_abs_error: float
    estimator: np.ndarray
    finite_difference: np.ndarray

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= FD_RELATIVE_TOLERANCE or self.max_abs_error <= FD_ABSOLUTE_FLOOR


def _reverse_kl(student_logits: np.ndarray, teacher_log_probs: np.ndarray) -> float:
    log_p = log_softmax(student_logits)
    return float(np.sum(np.exp(log_p) * (log_p - teacher_log_probs)))


def _jsd(student_logits: np.ndarray, teacher_log_probs: np.ndarray) -> float:
    log_p = log_softmax(student_logits)
    log_m = np.logaddexp(log_p, teacher_log_probs) - LOG2
    return 0.5 * float(np.sum(np.exp(log_p) * (log_p - log_m))) + 0.5 * float(
        np.sum(np.exp(teacher_log_probs) * (teacher_log_probs - log_m))
    )


def fd_gradient_check(
    policy: TabularPolicy,
    context: Sequence[int],
    divergence: str,
    teacher_context: Optional[Sequence[int]] = None,
    step: float = FD_STEP,
) -> FDResult:
    """
    Compare the score-function estimator of a divergence gradient with central
    finite differences of the divergence itself.

    The teacher distribution is read once from ``teacher_context`` (default:
    the student context) and held fixed while the student row is perturbed.
    reverse_kl estimator: -E_v[u_v grad log pi_S(v)]; jsd estimator:
    E_v[f'(pi_S(v)/pi_T(v)) grad log pi_S(v)], both enumerated exactly.
    """
    if divergence not in ("reverse_kl", "jsd"):
        raise ValueError(f"Unknown divergence '{divergence}', expected 'reverse_kl' or 'jsd'")

    row = policy.window_index(context)
    teacher_row = policy.window_index(teacher_context if teacher_context is not None else context)
    teacher_log_probs = log_softmax(policy.logits[teacher_row].copy())
    student_log_probs = log_softmax(policy.logits[row])

    if divergence == "reverse_kl":
        def weight(v: int) -> np.ndarray:
            u = teacher_log_probs[v] - student_log_probs[v]
            return -u * policy.grad_log_prob(context, v).values
        objective = _reverse_kl
    else:
        def weight(v: int) -> np.ndarray:
            ratio = math.exp(student_log_probs[v] - teacher_log_probs[v])
            return fprime_jsd(ratio) * policy.grad_log_prob(context, v).values
        objective = _jsd

    estimator = np.zeros(policy.vocab_size)
    for v, p_v in enumerate(np.exp(student_log_probs)):
        estimator += p_v * weight(v)

    base = policy.logits[row].copy()
    finite_difference = np.zeros_like(base)
    for j in range(base.size):
        bump = np.zeros_like(base)
        bump[j] = step
        finite_difference[j] = (
            objective(base + bump, teacher_log_probs) - objective(base - bump, teacher_log_probs)
        ) / (2.0 * step)

    abs_error = float(np.max(np.abs(estimator - finite_difference)))
    scale = max(float(np.max(np.abs(finite_difference))), FD_ABSOLUTE_FLOOR)
    return FDResult(abs_error / scale, abs_error, estimator, finite_difference)


@dataclass
class CheckResult:
    name: str
    trials: int
    max_error: float
    tolerance: float
    passed: bool
    message: str = ""


@dataclass
class GradcheckReport:
    """Outcome of every oracle check, serializable to JSON."""

    seed: int
    trials: int
    checks: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failures(self) -> List[str]:
        return [check.name for check in self.checks if not check.passed]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "trials": self.trials,
            "passed": self.passed,
            "checks": [asdict(check) for check in self.checks],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _check(name: str, trials: int, errors: Sequence[float], tolerance: float) -> CheckResult:
    worst = float(max(errors)) if len(errors) else 0.0
    passed = worst <= tolerance
    marker = "✓" if passed else "✗"
    message = f"{marker} {name}: max error {worst:.3e} (tolerance {tolerance:.0e})"
    logger.info(message)
    return CheckResult(name, trials, worst, tolerance, passed, message)


def _random_policy(rng: np.random.Generator, vocab_size: int) -> TabularPolicy:
    logits = rng.normal(0.0, 1.5, size=(vocab_size, vocab_size))
    return TabularPolicy(vocab_size=vocab_size, context_order=1, logits=logits)


def _shape_check() -> CheckResult:
    grid = np.linspace(-40.0, 40.0, 10001)
    errors = [abs(fprime_jsd(math.exp(-u)) + phi(u)) for u in grid]
    bound_violation = max(0.0, max(-LOG2 / 2 - phi(u) for u in grid))
    h = 1e-5
    slope_error = abs((phi(h) - phi(-h)) / (2 * h) - 0.25)
    result = _check("phi_shape_identity", 1, errors + [bound_violation], 1e-12)
    if slope_error > 1e-6:
        result.passed = False
        result.message = f"✗ phi_shape_identity: phi'(0) off by {slope_error:.3e}"
    return result


def _fd_check(name: str, divergence: str, trials: int, rng: np.random.Generator, vocab_size: int) -> CheckResult:
    errors = []
    for _ in range(trials):
        policy = _random_policy(rng, vocab_size)
        context = (int(rng.integers(vocab_size)),)
        teacher_context = (int(rng.integers(vocab_size)),)
        result = fd_gradient_check(policy, context, divergence, teacher_context)
        errors.append(0.0 if result.max_abs_error <= FD_ABSOLUTE_FLOOR else result.max_rel_error)
    return _check(name, trials, errors, FD_RELATIVE_TOLERANCE)


def _random_case(rng: np.random.Generator, joint: ExactJoint):
    x = int(rng.integers(joint.num_x))
    c = tuple(int(v) for v in rng.integers(joint.vocab_size, size=joint.c_len))
    y = tuple(int(v) for v in rng.integers(joint.vocab_size, size=joint.y_len))
    return x, c, y


def run_gradcheck(trials: int = 100, seed: int = 1234, vocab_size: int = 8) -> GradcheckReport:
    """
    Run every oracle check with ``trials`` randomized instances each.

    Args:
        trials: Random instances per randomized check
        seed: Seed of the check stream
        vocab_size: Vocabulary of the random tabular policies

    Returns:
        GradcheckReport with one entry per check
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = np.random.default_rng(seed)
    report = GradcheckReport(seed=seed, trials=trials)

    report.checks.append(_shape_check())
    report.checks.append(_fd_check("reverse_kl_gradient", "reverse_kl", trials, rng, vocab_size))
    report.checks.append(_fd_check("jsd_gradient", "jsd", trials, rng, vocab_size))

    pmi_errors, telescope_errors, increment_errors, scoring_errors = [], [], [], []
    for _ in range(trials):
        joint = ExactJoint.random(rng)
        x, c, y = _random_case(rng, joint)
        pmi = [exact_pmi(joint, x, c, y, t) for t in range(len(y))]
        pmi_errors.extend(abs(a - b) for a, b in pmi)
        summed, sequence_level = telescope_check(joint, x, c, y)
        telescope_errors.append(abs(summed - sequence_level))
        increments = potential_increments(joint, x, c, y)
        increment_errors.extend(abs(a - b) for (a, _), b in zip(pmi, increments))
        adapter = JointPolicy(joint)
        scores = score_rollout(adapter, adapter.prompt(x), adapter.privileged(c), y)
        scoring_errors.extend(abs(score.u - a) for score, (a, _) in zip(scores, pmi))

    report.checks.append(_check("pmi_identity", trials, pmi_errors, IDENTITY_TOLERANCE))
    report.checks.append(_check("telescoping", trials, telescope_errors, IDENTITY_TOLERANCE))
    report.checks.append(_check("potential_increments", trials, increment_errors, IDENTITY_TOLERANCE))
    report.checks.append(_check("score_rollout_equivalence", trials, scoring_errors, IDENTITY_TOLERANCE))

    expectation_errors, grad_errors = [], []
    for _ in range(trials):
        policy = _random_policy(rng, vocab_size)
        context = (int(rng.integers(vocab_size)),)
        expectation_errors.append(abs(enum_expectation(policy, context, lambda v: 1.0) - 1.0))
        score_mean = enum_expectation(policy, context, lambda v: policy.grad_log_prob(context, v).values)
        expectation_errors.append(float(np.max(np.abs(score_mean))))
        token = int(rng.integers(vocab_size))
        grad_errors.append(_grad_log_prob_fd_error(policy, context, token))

    report.checks.append(_check("enum_expectation", trials, expectation_errors, 1e-12))
    report.checks.append(_check("grad_log_prob_fd", trials, grad_errors, 1e-6))
    return report


def _grad_log_prob_fd_error(policy: TabularPolicy, context: Sequence[int], token: int, step: float = FD_STEP) -> float:
    row = policy.window_index(context)
    base = policy.logits[row].copy()
    analytic = policy.grad_log_prob(context, token).values
    numeric = np.zeros_like(base)
    for j in range(base.size):
        bump = np.zeros_like(base)
        bump[j] = step
        numeric[j] = (log_softmax(base + bump)[token] - log_softmax(base - bump)[token]) / (2.0 * step)
    return float(np.max(np.abs(analytic - numeric)))
