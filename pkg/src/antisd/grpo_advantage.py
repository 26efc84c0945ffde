"""Group-normalized sequence advantages and their composition with the token signal."""

from dataclasses import dataclass, field
from enum import Enum
from typing import List, Sequence, Tuple

import numpy as np

from .pmi_signal import TokenScore

DEGENERATE_STD = 1e-8


class ComposeMode(str, Enum):
    """How the per-token term joins the sequence-level advantage."""

    ADDITIVE = "additive"
    MULTIPLICATIVE = "multiplicative"
    TOKEN_ONLY = "token_only"


@dataclass
class GroupBatch:
    """G rollouts of one prompt with rewards, truncation flags and scores."""

    prompt_id: int
    rollouts: List[Tuple[int, ...]]
    rewards: List[float]
    truncated: List[bool]
    scores: List[List[TokenScore]] = field(default_factory=list)

    def __post_init__(self):
        size = len(self.rollouts)
        if size < 2:
            raise ValueError(f"A group needs at least 2 rollouts, got {size}")
        if len(self.rewards) != size or len(self.truncated) != size:
            raise ValueError("rollouts, rewards and truncated must have equal length")
        if self.scores and len(self.scores) != size:
            raise ValueError("scores must be empty or one sequence per rollout")
        if not all(np.isfinite(self.rewards)):
            raise ValueError("Rewards must be finite")

    @property
    def group_size(self) -> int:
        return len(self.rollouts)


def seq_advantage(rewards: Sequence[float]) -> List[float]:
    """
    (R_i - mean) / std with the population std.

    A group whose std is below 1e-8 gets all-zero advantages.

    Raises:
        ValueError: for fewer than two rewards
    """
    if len(rewards) < 2:
        raise ValueError(f"seq_advantage needs at least 2 rewards, got {len(rewards)}")
    values = np.asarray(rewards, dtype=np.float64)
    std = float(values.std())
    if std < DEGENERATE_STD:
        return [0.0] * len(values)
    return ((values - values.mean()) / std).tolist()


def compose(a_seq: float, delta: float, lam: float, mode: ComposeMode) -> float:
    """
    Final per-token advantage, used as a constant weight on grad log pi.

    additive: a_seq + lam * delta; multiplicative: a_seq * (1 + lam * delta);
    token_only: lam * delta.
    """
    mode = ComposeMode(mode)
    if mode is ComposeMode.ADDITIVE:
        return a_seq + lam * delta
    if mode is ComposeMode.MULTIPLICATIVE:
        return a_seq * (1.0 + lam * delta)
    return lam * delta
