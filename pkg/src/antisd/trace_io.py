"""Per-token trace records and the CSV files they are written to."""

import csv
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterable, List, Sequence, TextIO, Tuple

import numpy as np

from .grpo_advantage import compose
from .metrics import StepMetrics


@dataclass(frozen=True)
class TraceRecord:
    """One (step, rollout, token) row of intermediate training quantities."""

    step: int
    prompt_index: int
    prompt_id: int
    rollout: int
    position: int
    token: int
    s: float
    t: float
    u: float
    phi: float
    delta: float
    a_seq: float
    a_total: float
    gate: int
    lam: float
    teacher_entropy: float
    entropy_median: float
    reward: float
    truncated: bool
    compose: str

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @property
    def sort_key(self) -> Tuple[int, int, int, int]:
        return (self.step, self.prompt_index, self.rollout, self.position)


def _format(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def _parse(kind, raw: str):
    if kind in (bool, "bool"):
        return raw == "1"
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


class TraceWriter:
    """
    Append-only CSV writer with a fixed header line.

    Floats are written with 17 significant digits so a reader gets the
    exact doubles back.
    """

    def __init__(self, path: str):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle: TextIO = open(self.path, "w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._handle, lineterminator="\n")
        self._writer.writerow(TraceRecord.field_names())
        self.rows_written = 0

    def write(self, records: Iterable[TraceRecord]):
        for record in records:
            self._writer.writerow([_format(v) for v in astuple(record)])
            self.rows_written += 1

    def close(self):
        if not self._handle.closed:
            self._handle.close()

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, *exc):
        self.close()


def read_trace(path: str) -> List[TraceRecord]:
    """Parse a trace CSV back into records."""
    kinds = {f.name: f.type for f in fields(TraceRecord)}
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != TraceRecord.field_names():
            raise ValueError(f"Unexpected trace header in {path}: {reader.fieldnames}")
        return [
            TraceRecord(**{name: _parse(kinds[name], raw) for name, raw in row.items()})
            for row in reader
        ]


def reconstruct_advantages(records: Sequence[TraceRecord]) -> List[float]:
    """Recompute every per-token advantage from (a_seq, delta, lam, compose)."""
    return [compose(r.a_seq, r.delta, r.lam, r.compose) for r in records]


def verify_trace(records: Sequence[TraceRecord], tolerance: float = 1e-10) -> Tuple[bool, str]:
    """
    Check ordering, finiteness and advantage reconstruction of a trace.

    Returns:
        Tuple of (success, message)
    """
    keys = [r.sort_key for r in records]
    if keys != sorted(keys):
        return False, "Trace rows are not ordered by (step, prompt_index, rollout, position)"
    for r in records:
        numeric = (r.s, r.t, r.u, r.phi, r.delta, r.a_seq, r.a_total, r.lam, r.teacher_entropy)
        if not all(np.isfinite(numeric)):
            return False, f"Non-finite value at step {r.step}, rollout {r.rollout}, position {r.position}"
    worst = 0.0
    for r, rebuilt in zip(records, reconstruct_advantages(records)):
        worst = max(worst, abs(rebuilt - r.a_total))
    if worst > tolerance:
        return False, f"Advantage reconstruction error {worst:.3e} exceeds {tolerance:.0e}"
    return True, f"{len(records)} rows, max reconstruction error {worst:.3e}"


def write_metrics_csv(path: str, history: Sequence[StepMetrics]):
    """One row per training step."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    names = StepMetrics.field_names()
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(names)
        for metrics in history:
            row = metrics.to_dict()
            writer.writerow([_format(row[name]) for name in names])


def read_metrics_csv(path: str) -> List[StepMetrics]:
    with open(path, newline="", encoding="utf-8") as handle:
        return [StepMetrics.from_dict(row) for row in csv.DictReader(handle)]
