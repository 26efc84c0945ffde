"""Log-space categorical distributions, the phi shape and divergence primitives."""

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

# Per-token log-probabilities never go below this value, so |u| <= 60.
LOG_PROB_FLOOR = -30.0
LOG2 = math.log(2.0)


class DimensionMismatchError(ValueError):
    """Raised when two distributions live on different vocabularies."""


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Normalize a logit vector into log-probabilities."""
    logits = np.asarray(logits, dtype=np.float64)
    return logits - logsumexp(logits)


@dataclass(frozen=True, eq=False)
class Categorical:
    """
    Normalized next-token distribution over a small vocabulary.

    Construct through ``from_logits``, ``from_probs`` or ``uniform``; those
    clamp at the floor and renormalize so ``logsumexp(log_probs) == 0``.
    """

    log_probs: np.ndarray

    @classmethod
    def from_logits(cls, logits, floor: float = LOG_PROB_FLOOR) -> "Categorical":
        log_probs = np.maximum(log_softmax(logits), floor)
        # Clamping adds at most V * e^floor mass; renormalize it away.
        log_probs = log_probs - logsumexp(log_probs)
        log_probs.setflags(write=False)
        return cls(log_probs)

    @classmethod
    def from_probs(cls, probs, floor: float = LOG_PROB_FLOOR) -> "Categorical":
        probs = np.asarray(probs, dtype=np.float64)
        if np.any(probs < 0):
            raise ValueError("Probabilities must be nonnegative")
        with np.errstate(divide="ignore"):
            logits = np.log(probs)
        return cls.from_logits(np.maximum(logits, floor), floor=floor)

    @classmethod
    def uniform(cls, vocab_size: int) -> "Categorical":
        return cls.from_logits(np.zeros(vocab_size))

    @property
    def vocab_size(self) -> int:
        return int(self.log_probs.shape[0])

    @cached_property
    def probs(self) -> np.ndarray:
        probs = np.exp(self.log_probs)
        probs.setflags(write=False)
        return probs

    @cached_property
    def entropy(self) -> float:
        """Shannon entropy in nats."""
        return max(-float(np.sum(self.probs * self.log_probs)), 0.0)

    def log_prob(self, token: int) -> float:
        return float(self.log_probs[token])


def _check_same_vocab(p: Categorical, q: Categorical):
    if p.vocab_size != q.vocab_size:
        raise DimensionMismatchError(
            f"Vocabulary size mismatch: {p.vocab_size} vs {q.vocab_size}"
        )


def softplus(u: float) -> float:
    """log(1 + e^u), overflow-safe in both tails."""
    if u > 30.0:
        return u + math.log1p(math.exp(-u))
    return math.log1p(math.exp(u))


def phi(u: float) -> float:
    """JSD shape: 0.5 * (softplus(u) - log 2). Strictly increasing, phi(0) = 0."""
    return 0.5 * (softplus(u) - LOG2)


def phi_array(u: np.ndarray) -> np.ndarray:
    """Vectorized ``phi`` (np.logaddexp(0, u) is the stable softplus)."""
    return 0.5 * (np.logaddexp(0.0, np.asarray(u, dtype=np.float64)) - LOG2)


def fprime_jsd(r: float) -> float:
    """
    Derivative of the JSD generator, 0.5 * log(2r / (1 + r)).

    Satisfies ``fprime_jsd(exp(-u)) == -phi(u)``.

    Raises:
        ValueError: if r is not strictly positive
    """
    if not r > 0:
        raise ValueError(f"fprime_jsd requires r > 0, got {r}")
    return 0.5 * (LOG2 + math.log(r) - math.log1p(r))


def jsd_generator(r: float) -> float:
    """f(r) = 0.5 * r * log(2r/(1+r)) + 0.5 * log(2/(1+r)), with f(1) = 0."""
    if r < 0:
        raise ValueError(f"jsd_generator requires r >= 0, got {r}")
    tail = 0.5 * (LOG2 - math.log1p(r))
    if r == 0:
        return tail
    return 0.5 * r * (LOG2 + math.log(r) - math.log1p(r)) + tail


def kl(p: Categorical, q: Categorical) -> float:
    """KL(p || q) in nats."""
    _check_same_vocab(p, q)
    value = float(np.sum(p.probs * (p.log_probs - q.log_probs)))
    return max(value, 0.0)


def jsd(p: Categorical, q: Categorical) -> float:
    """Symmetric Jensen-Shannon divergence, bounded in [0, log 2]."""
    _check_same_vocab(p, q)
    log_m = np.logaddexp(p.log_probs, q.log_probs) - LOG2
    value = 0.5 * float(np.sum(p.probs * (p.log_probs - log_m)))
    value += 0.5 * float(np.sum(q.probs * (q.log_probs - log_m)))
    return min(max(value, 0.0), LOG2)


def jsd_fdiv(p: Categorical, q: Categorical) -> float:
    """JSD written as E_{v~q}[f(p(v)/q(v))]; agrees with ``jsd``."""
    _check_same_vocab(p, q)
    ratios = np.exp(p.log_probs - q.log_probs)
    return float(sum(qv * jsd_generator(rv) for qv, rv in zip(q.probs, ratios)))


def entropy(p: Categorical) -> float:
    """Shannon entropy in nats."""
    return p.entropy
