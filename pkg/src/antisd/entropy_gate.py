"""Auto-calibrated Schmitt-trigger gate on the batch-median teacher entropy."""

import dataclasses
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence, Tuple

import numpy as np

from .pmi_signal import TokenScore

DEFAULT_MULTIPLIER = 0.93


class GateSignal(str, Enum):
    TEACHER_ENTROPY = "teacher_entropy"
    STUDENT_ENTROPY = "student_entropy"


class GateNotCalibratedError(RuntimeError):
    """Raised when the gate is stepped before warmup calibration."""


@dataclass(frozen=True)
class GateState:
    """
    Schmitt-trigger state.

    g switches 1 -> 0 when H < tau_down and 0 -> 1 when H >= h_warm.
    ``enabled=False`` is the no-gate ablation (lambda always lambda_max);
    ``forced_closed`` pins lambda to 0.
    """

    g: int = 1
    h_warm: float = 0.0
    tau_down: float = 0.0
    lambda_max: float = 0.5
    calibrated: bool = False
    signal_source: GateSignal = GateSignal.TEACHER_ENTROPY
    enabled: bool = True
    forced_closed: bool = False
    multiplier: float = DEFAULT_MULTIPLIER
    warmup_medians: Tuple[float, ...] = ()
    last_h: float = float("nan")

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["signal_source"] = self.signal_source.value
        data["warmup_medians"] = list(self.warmup_medians)
        data["last_h"] = None if np.isnan(self.last_h) else self.last_h
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "GateState":
        values = dict(data)
        values["signal_source"] = GateSignal(values["signal_source"])
        values["warmup_medians"] = tuple(values.get("warmup_medians", ()))
        last_h = values.get("last_h")
        values["last_h"] = float("nan") if last_h is None else last_h
        return cls(**values)


def calibrate(
    warmup_medians: Sequence[float],
    multiplier: float = DEFAULT_MULTIPLIER,
    lambda_max: float = 0.5,
    signal_source: GateSignal = GateSignal.TEACHER_ENTROPY,
    enabled: bool = True,
    forced_closed: bool = False,
) -> GateState:
    """
    Calibrate from one median entropy per warmup step.

    h_warm is the median of the per-step medians, tau_down = multiplier * h_warm,
    and the gate starts open.

    Raises:
        ValueError: for an empty list or a multiplier outside (0, 1)
    """
    if len(warmup_medians) == 0:
        raise ValueError("Calibration needs at least one warmup median")
    if not 0.0 < multiplier < 1.0:
        raise ValueError(f"Gate multiplier must lie in (0, 1), got {multiplier}")

    h_warm = float(np.median(np.asarray(warmup_medians, dtype=np.float64)))
    return GateState(
        g=0 if forced_closed else 1,
        h_warm=h_warm,
        tau_down=multiplier * h_warm,
        lambda_max=lambda_max,
        calibrated=True,
        signal_source=GateSignal(signal_source),
        enabled=enabled,
        forced_closed=forced_closed,
        multiplier=multiplier,
        warmup_medians=tuple(float(m) for m in warmup_medians),
    )


def gate_step(state: GateState, h: float) -> Tuple[GateState, float]:
    """
    Apply one Schmitt-trigger transition and return the resulting lambda.

    Raises:
        GateNotCalibratedError: if warmup calibration has not run
        ValueError: for a negative or non-finite entropy
    """
    if not state.calibrated:
        raise GateNotCalibratedError("Gate stepped before calibration")
    if not np.isfinite(h) or h < 0:
        raise ValueError(f"Gate entropy must be finite and nonnegative, got {h}")

    if state.forced_closed:
        return dataclasses.replace(state, g=0, last_h=h), 0.0
    if not state.enabled:
        return dataclasses.replace(state, last_h=h), state.lambda_max

    g = state.g
    if g == 0 and h >= state.h_warm:
        g = 1
    elif g == 1 and h < state.tau_down:
        g = 0
    return dataclasses.replace(state, g=g, last_h=h), g * state.lambda_max


def batch_entropy_median(
    scores: Iterable[Sequence[TokenScore]],
    signal_source: GateSignal = GateSignal.TEACHER_ENTROPY,
) -> float:
    """
    Median entropy pooled over every token of every rollout in the step.

    Even counts take the midpoint of the two central values.

    Raises:
        ValueError: if the batch holds no tokens
    """
    use_student = GateSignal(signal_source) is GateSignal.STUDENT_ENTROPY
    values = [
        score.student_entropy if use_student else score.teacher_entropy
        for rollout in scores
        for score in rollout
    ]
    if not values:
        raise ValueError("Cannot take the entropy median of an empty batch")
    return float(np.median(values))
