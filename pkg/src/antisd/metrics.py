"""Per-step metrics, run reports and the comparisons drawn between arms."""

import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np


@dataclass
class StepMetrics:
    """Everything logged for one training step."""

    step: int
    phase: str = "train"
    reward_mean: float = 0.0
    reward_nontruncated: float = 0.0
    nontruncated_count: int = 0
    truncated_fraction: float = 0.0
    mean_length: float = 0.0
    student_entropy: float = 0.0
    teacher_entropy: float = 0.0
    entropy_median: float = 0.0
    gate: int = 0
    lam: float = 0.0
    mean_u: float = 0.0
    mean_delta: float = 0.0
    mean_abs_advantage: float = 0.0
    grad_norm: float = 0.0
    group_solution_fraction: float = 0.0

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "StepMetrics":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for key, value in data.items():
            kind = kinds[key]
            if kind in (int, "int"):
                values[key] = int(value)
            elif kind in (float, "float"):
                values[key] = float(value)
            else:
                values[key] = value
        return cls(**values)


@dataclass
class RunReport:
    """Aggregate of one run: history, final evaluation and gate provenance."""

    arm: str
    seed: int
    steps: int
    config_hash: str
    history: List[StepMetrics] = field(default_factory=list)
    gate: Dict[str, object] = field(default_factory=dict)
    heldout_avg_at_k: float = 0.0
    heldout_pass_at_k: float = 0.0
    train_avg_at_k: float = 0.0
    train_pass_at_k: float = 0.0
    eval_k: int = 0
    pass_at_k_curve: Dict[int, float] = field(default_factory=dict)
    peak_rolling_reward: float = 0.0
    final_rolling_reward: float = 0.0
    pretrain_nll: Optional[float] = None
    resumed_from_step: Optional[int] = None

    def rewards(self, phase: Optional[str] = None) -> List[float]:
        return [m.reward_mean for m in self.history if phase is None or m.phase == phase]

    def summarize_rewards(self, window: int = 20):
        """Fill peak/final rolling-mean reward from the history."""
        rolling = rolling_mean(self.rewards(), window)
        if len(rolling):
            self.peak_rolling_reward = float(np.max(rolling))
            self.final_rolling_reward = float(rolling[-1])

    def to_dict(self) -> dict:
        data = asdict(self)
        data["history"] = [m.to_dict() for m in self.history]
        data["pass_at_k_curve"] = {str(k): v for k, v in self.pass_at_k_curve.items()}
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        values = dict(data)
        values["history"] = [StepMetrics.from_dict(m) for m in data.get("history", [])]
        values["pass_at_k_curve"] = {int(k): v for k, v in data.get("pass_at_k_curve", {}).items()}
        return cls(**values)


def rolling_mean(values: Sequence[float], window: int = 20) -> np.ndarray:
    """
    Trailing mean over the last ``window`` values.

    The first window-1 entries average over the values seen so far.
    """
    if window < 1:
        raise ValueError("window must be at least 1")
    data = np.asarray(values, dtype=np.float64)
    if data.size == 0:
        return data
    cumulative = np.concatenate(([0.0], np.cumsum(data)))
    index = np.arange(1, data.size + 1)
    start = np.maximum(index - window, 0)
    return (cumulative[index] - cumulative[start]) / (index - start)


def first_step_reaching(series: Sequence[float], target: float) -> Optional[int]:
    """1-based index of the first entry >= target, or None."""
    hits = np.flatnonzero(np.asarray(series, dtype=np.float64) >= target)
    return int(hits[0]) + 1 if hits.size else None


def speedup(
    baseline_rewards: Sequence[float],
    candidate_rewards: Sequence[float],
    window: int = 20,
) -> float:
    """
    Baseline's best-rolling-mean step divided by the candidate's first step
    reaching that same rolling-mean value.

    Returns 0.0 when the candidate never gets there.
    """
    baseline = rolling_mean(baseline_rewards, window)
    candidate = rolling_mean(candidate_rewards, window)
    if baseline.size == 0 or candidate.size == 0:
        return 0.0
    best_step = int(np.argmax(baseline)) + 1
    reached = first_step_reaching(candidate, float(baseline[best_step - 1]))
    if reached is None:
        return 0.0
    return best_step / reached


def plateau_step(rewards: Sequence[float], window: int = 20, tolerance: float = 0.05) -> Optional[int]:
    """1-based first step whose rolling mean comes within ``tolerance`` (relative) of its best value."""
    rolling = rolling_mean(rewards, window)
    if rolling.size == 0:
        return None
    return first_step_reaching(rolling, (1.0 - tolerance) * float(np.max(rolling)))


def peak_decline(rewards: Sequence[float], window: int = 20) -> float:
    """Relative drop of the rolling mean from its peak to the lowest later value."""
    rolling = rolling_mean(rewards, window)
    if rolling.size == 0:
        return 0.0
    peak_index = int(np.argmax(rolling))
    peak = float(rolling[peak_index])
    if peak <= 0:
        return 0.0
    return (peak - float(np.min(rolling[peak_index:]))) / peak


def avg_and_pass_at_k(correct: Sequence[Sequence[int]]) -> tuple:
    """
    avg@k and pass@k from per-problem correctness vectors of length k.

    Returns:
        Tuple of (avg@k, pass@k)
    """
    if len(correct) == 0:
        return 0.0, 0.0
    per_problem = [np.asarray(row, dtype=np.float64) for row in correct]
    avg = float(np.mean([row.mean() for row in per_problem]))
    passed = float(np.mean([1.0 if row.max() > 0 else 0.0 for row in per_problem]))
    return avg, passed


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k: 1 - C(n-c, k) / C(n, k)."""
    if not 0 <= c <= n or not 1 <= k <= n:
        raise ValueError(f"Need 0 <= c <= n and 1 <= k <= n, got n={n}, c={c}, k={k}")
    if n - c < k:
        return 1.0
    return 1.0 - float(np.prod(1.0 - k / np.arange(n - c + 1, n + 1)))


def pass_at_k_curve(correct_counts: Sequence[int], n: int, ks: Sequence[int]) -> Dict[int, float]:
    """Mean unbiased pass@k over problems for every k in ``ks`` not above n."""
    return {
        k: float(np.mean([pass_at_k(n, c, k) for c in correct_counts])) if correct_counts else 0.0
        for k in ks
        if 1 <= k <= n
    }


def default_curve_ks(n: int) -> List[int]:
    """Powers of two up to n, plus n itself."""
    ks = [2 ** i for i in range(int(math.log2(n)) + 1)] if n >= 1 else []
    if n not in ks:
        ks.append(n)
    return ks
