"""Per-token student/teacher scores and the per-token advantage signal."""

from dataclasses import dataclass
from enum import Enum
from typing import List, Protocol, Sequence

from .core_math import LOG_PROB_FLOOR, Categorical, entropy, phi
from .policy_env import ContextWindowError


class SignalMode(str, Enum):
    """Divergence and direction of the per-token term."""

    SD_REVERSE_KL_DESCENT = "sd_reverse_kl_descent"
    REVERSE_KL_ASCENT = "reverse_kl_ascent"
    JSD_ASCENT = "jsd_ascent"
    NO_TEACHER = "no_teacher"


class PolicyHandle(Protocol):
    """Anything that maps a token context to a next-token Categorical."""

    max_context_length: int

    def next_dist(self, context: Sequence[int]) -> Categorical:
        ...


@dataclass(frozen=True)
class TokenScore:
    """
    Scores of one sampled token.

    s and t are the student and teacher log-probs of the token, u = t - s is
    assembled once here. Teacher values are constants for any gradient.
    """

    s: float
    t: float
    u: float
    teacher_entropy: float
    position: int
    student_entropy: float = 0.0
    token: int = -1


def score_rollout(
    policy: PolicyHandle,
    prompt: Sequence[int],
    privileged: Sequence[int],
    rollout: Sequence[int],
) -> List[TokenScore]:
    """
    Score every rollout token under the bare and the enriched context.

    Student context is prompt + rollout prefix; teacher context is
    prompt + privileged + rollout prefix, evaluated with the same parameters.

    Raises:
        ValueError: if the rollout is empty
        ContextWindowError: if the enriched context outgrows the policy window
    """
    if len(rollout) == 0:
        raise ValueError("Cannot score an empty rollout")

    limit = getattr(policy, "max_context_length", None)
    bare = list(prompt)
    enriched = list(prompt) + list(privileged)
    shared = len(privileged) == 0
    scores: List[TokenScore] = []

    for position, token in enumerate(rollout):
        if limit is not None and len(enriched) > limit:
            raise ContextWindowError(position, len(enriched), limit)

        student = policy.next_dist(bare)
        teacher = student if shared else policy.next_dist(enriched)
        s = max(student.log_prob(token), LOG_PROB_FLOOR)
        t = max(teacher.log_prob(token), LOG_PROB_FLOOR)
        student_entropy = entropy(student)
        scores.append(
            TokenScore(
                s=s,
                t=t,
                u=t - s,
                teacher_entropy=student_entropy if shared else entropy(teacher),
                position=position,
                student_entropy=student_entropy,
                token=int(token),
            )
        )
        bare.append(token)
        enriched.append(token)

    return scores


def delta(u: float, mode: SignalMode, student_logprob: float = 0.0) -> float:
    """
    Per-token advantage contribution.

    sd_reverse_kl_descent: +u; reverse_kl_ascent: -u; jsd_ascent: -phi(u);
    no_teacher: -phi(-s), the jsd shape with the teacher log-prob set to 0.
    """
    mode = SignalMode(mode)
    if mode is SignalMode.SD_REVERSE_KL_DESCENT:
        return u
    if mode is SignalMode.REVERSE_KL_ASCENT:
        return -u
    if mode is SignalMode.JSD_ASCENT:
        return -phi(u)
    return -phi(-student_logprob)


def rollout_deltas(scores: Sequence[TokenScore], mode: SignalMode) -> List[float]:
    """``delta`` for every token of a scored rollout."""
    return [delta(score.u, mode, score.s) for score in scores]
