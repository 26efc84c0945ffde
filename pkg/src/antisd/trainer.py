"""AntiSD training: warmup, gate calibration, rollouts, scoring, update and checkpoints."""

import dataclasses
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ARM_FIELDS, TrainConfig, parse_override
from .core_math import LOG_PROB_FLOOR, phi
from .entropy_gate import GateNotCalibratedError, GateState, batch_entropy_median, calibrate, gate_step
from .grpo_advantage import GroupBatch, compose, seq_advantage
from .metrics import (
    RunReport,
    StepMetrics,
    avg_and_pass_at_k,
    default_curve_ks,
    first_step_reaching,
    pass_at_k_curve,
    peak_decline,
    plateau_step,
    rolling_mean,
    speedup,
)
from .pmi_signal import SignalMode, TokenScore, rollout_deltas, score_rollout
from .policy_env import (
    PrivilegedContext,
    PrivilegedSource,
    Problem,
    TabularPolicy,
    Task,
    build_privileged,
    pretrain,
    sample_rollout,
)
from .trace_io import TraceRecord

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "antisd-checkpoint/1"

# Spawn keys of the auxiliary random streams; training step n uses (n,).
PRETRAIN_STREAM = (0, 0)
EVAL_STREAM = (0, 1)
TRACE_STREAM = (0, 3)
DATA_STREAM = 2


class ScoringError(RuntimeError):
    """A rollout could not be scored; carries where it happened."""

    def __init__(self, step: int, prompt_id: int, rollout_index: int, cause: Exception):
        super().__init__(
            f"Scoring failed at step {step}, prompt {prompt_id}, rollout {rollout_index}: {cause}"
        )
        self.step = step
        self.prompt_id = prompt_id
        self.rollout_index = rollout_index
        self.cause = cause


class CheckpointMismatchError(ValueError):
    """Checkpoint and config disagree on parameter shapes or the problem set."""


@dataclass
class Checkpoint:
    """
    Everything needed to continue a run bit-exactly.

    The random state is (seed, step, data_cursor): every stream is derived
    from those, so no generator internals are stored.
    """

    policy: dict
    gate: Optional[dict]
    warmup_medians: List[float]
    step: int
    seed: int
    data_cursor: int
    config: dict
    config_hash: str
    optimizer: dict = field(default_factory=lambda: {"kind": "sgd"})
    history: List[dict] = field(default_factory=list)
    pretrain_nll: Optional[float] = None
    format: str = CHECKPOINT_FORMAT

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        data = json.loads(text)
        if data.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointMismatchError(f"Unsupported checkpoint format: {data.get('format')}")
        return cls(**data)

    def save(self, path: str):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def verify_checkpoint_file(path: str) -> Tuple[bool, str]:
    """
    Check that a checkpoint file exists, parses and has a consistent policy table.

    Returns:
        Tuple of (success, message)
    """
    file_path = Path(path)
    if not file_path.exists():
        return False, f"Checkpoint not found: {path}"
    try:
        checkpoint = Checkpoint.load(path)
    except (ValueError, TypeError) as e:
        return False, f"Checkpoint unreadable: {e}"
    policy = checkpoint.policy
    expected = policy["vocab_size"] ** policy["context_order"] * policy["vocab_size"]
    if len(policy["logits"]) != expected:
        return False, f"Policy table has {len(policy['logits'])} entries, expected {expected}"
    return True, f"Checkpoint at step {checkpoint.step} ({file_path.stat().st_size} bytes)"


def format_duration(seconds: float) -> str:
    if seconds < 60:
        return f"{seconds:.0f}s"
    if seconds < 3600:
        return f"{seconds / 60:.1f}min"
    return f"{seconds / 3600:.1f}h"


@dataclass
class GroupResult:
    """Rollouts of one prompt with their privileged contexts and scores."""

    problem: Problem
    group: GroupBatch
    privileged: List[PrivilegedContext]


def accumulate_surrogate_gradient(
    gradient: np.ndarray,
    policy: TabularPolicy,
    prompt: Sequence[int],
    rollout: Sequence[int],
    advantages: Sequence[float],
    old_log_probs: Sequence[float],
    clip_ratio: float,
    scale: float = 1.0,
):
    """
    Add the gradient of the clipped surrogate sum_t min(r A, clip(r) A).

    r = pi_new / pi_old per token. A token whose clipped branch is active
    contributes nothing; otherwise it contributes A * r * grad log pi.
    """
    context = list(prompt)
    for token, advantage, old in zip(rollout, advantages, old_log_probs):
        new = max(policy.next_dist(context).log_prob(token), LOG_PROB_FLOOR)
        ratio = float(np.exp(new - old))
        clipped = (advantage >= 0 and ratio > 1.0 + clip_ratio) or (
            advantage < 0 and ratio < 1.0 - clip_ratio
        )
        if not clipped:
            grad = policy.grad_log_prob(context, token)
            gradient[grad.row] += (scale * advantage * ratio) * grad.values
        context.append(token)


def accumulate_reinforce_gradient(
    gradient: np.ndarray,
    policy: TabularPolicy,
    prompt: Sequence[int],
    rollout: Sequence[int],
    advantages: Sequence[float],
    scale: float = 1.0,
):
    """Add sum_t A_t * grad log pi(y_t | prefix)."""
    context = list(prompt)
    for token, advantage in zip(rollout, advantages):
        grad = policy.grad_log_prob(context, token)
        gradient[grad.row] += (scale * advantage) * grad.values
        context.append(token)


def evaluate_counts(
    policy: TabularPolicy,
    problems: Sequence[Problem],
    k: int,
    task: Task,
    max_len: int,
    rng: np.random.Generator,
    temperature: float = 0.7,
    top_p: float = 0.95,
) -> List[List[int]]:
    """Per-problem correctness vectors of k sampled rollouts."""
    if k < 1:
        raise ValueError("k must be at least 1")
    results = []
    for problem in problems:
        row = []
        for _ in range(k):
            rollout, truncated = sample_rollout(policy, problem.prompt, max_len, rng, temperature, top_p)
            row.append(0 if truncated else task.verify(problem.prompt, rollout))
        results.append(row)
    return results


def evaluate(
    policy: TabularPolicy,
    problems: Sequence[Problem],
    k: int,
    task: Task,
    max_len: int = 12,
    rng: Optional[np.random.Generator] = None,
    temperature: float = 0.7,
    top_p: float = 0.95,
) -> Tuple[float, float]:
    """
    avg@k and pass@k over ``problems``.

    Returns:
        Tuple of (avg@k, pass@k)
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    return avg_and_pass_at_k(evaluate_counts(policy, problems, k, task, max_len, rng, temperature, top_p))


class Trainer:
    """Runs AntiSD, or one of its ablation arms, on a tabular policy."""

    def __init__(self, config: TrainConfig, checkpoint_dir: Optional[str] = None):
        self.config = config
        self.task = config.make_task()
        self.policy: Optional[TabularPolicy] = None
        self.gate: Optional[GateState] = None
        self.warmup_medians: List[float] = []
        self.step = 0
        self.data_cursor = 0
        self.history: List[StepMetrics] = []
        self.pretrain_nll: Optional[float] = None
        self.resumed_from_step: Optional[int] = None
        self.checkpoint_dir = checkpoint_dir
        self.is_running = False
        self.should_stop = False
        self.progress_callback: Optional[Callable] = None
        self.log_callback: Optional[Callable] = None
        self.trace_callback: Optional[Callable] = None
        self.last_progress_update = 0
        self.progress_update_interval = 2.0  # Update progress at most every 2 seconds
        self.start_time = None
        self.start_step = 0
        self._orders: Dict[int, np.ndarray] = {}

    def set_progress_callback(self, callback: Callable):
        """Set callback for progress updates."""
        self.progress_callback = callback

    def set_log_callback(self, callback: Callable):
        """Set callback for log messages."""
        self.log_callback = callback

    def set_trace_callback(self, callback: Callable):
        """Set callback receiving the TraceRecords of every step."""
        self.trace_callback = callback

    def stop(self):
        self.should_stop = True

    def _log(self, message: str, level: int = logging.INFO):
        logger.log(level, message)
        if self.log_callback:
            self.log_callback(message)

    def remaining_seconds(self, current: int, total: int, now: float) -> Optional[float]:
        """Seconds left at the pace of the steps taken since ``run`` started (None before the first)."""
        done = current - self.start_step
        if not self.start_time or done <= 0 or now <= self.start_time:
            return None
        return (total - current) * (now - self.start_time) / done

    def _update_progress(self, current: int, total: int, message: str = "", force: bool = False):
        """Report step progress at most every ``progress_update_interval`` seconds unless forced."""
        now = time.time()
        if not force and now - self.last_progress_update < self.progress_update_interval:
            return

        remaining = self.remaining_seconds(current, total, now)
        if remaining is not None:
            finish = (datetime.now() + timedelta(seconds=remaining)).strftime("%H:%M:%S")
            message = f"{message} | ETA: {format_duration(remaining)} (done at {finish})"
        if self.progress_callback:
            self.progress_callback(current, total, message)
        self.last_progress_update = now

    def _stream(self, key: Tuple[int, ...]) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.config.seed, spawn_key=key))

    def initialize_policy(self):
        """Fresh policy with the supervised warm start applied."""
        config = self.config
        self.policy = TabularPolicy(config.vocab_size, config.context_order, config.max_context_length)
        solvable = self.task.solvable_fraction(config.context_order)
        if solvable < 1.0:
            self._log(
                f"⚠ Only {solvable:.0%} of the problems fit a window of {config.context_order} tokens; "
                f"reward is capped below 1",
                logging.WARNING,
            )
        if config.pretrain_steps > 0:
            self.pretrain_nll = pretrain(
                self.policy,
                self.task,
                config.pretrain_steps,
                config.pretrain_lr,
                config.pretrain_noise,
                self._stream(PRETRAIN_STREAM),
            )
            self._log(f"✓ Warm start: {config.pretrain_steps} steps, mean NLL {self.pretrain_nll:.4f}")

    def _next_batch(self) -> List[Problem]:
        """Next prompts of the seeded shuffled cycle over the train split."""
        problems = self.task.problems("train")
        batch = []
        for _ in range(self.config.batch_prompts):
            epoch, position = divmod(self.data_cursor, len(problems))
            if epoch not in self._orders:
                self._orders = {epoch: self._stream((0, DATA_STREAM, epoch)).permutation(len(problems))}
            batch.append(problems[int(self._orders[epoch][position])])
            self.data_cursor += 1
        return batch

    def _rollout_group(self, problem: Problem, rng: np.random.Generator, step: int) -> GroupResult:
        config = self.config
        rollouts, rewards, truncated = [], [], []
        for _ in range(config.group_size):
            rollout, was_truncated = sample_rollout(
                self.policy, problem.prompt, config.max_len, rng,
                config.train_temperature, config.train_top_p,
            )
            rollouts.append(tuple(rollout))
            truncated.append(was_truncated)
            rewards.append(0.0 if was_truncated else float(self.task.verify(problem.prompt, rollout)))

        group = GroupBatch(problem.problem_id, rollouts, rewards, truncated)
        no_teacher = config.signal is SignalMode.NO_TEACHER
        privileged = [
            build_privileged(group, self.task, problem, index, no_teacher)
            for index in range(group.group_size)
        ]
        for index, (rollout, context) in enumerate(zip(rollouts, privileged)):
            try:
                group.scores.append(score_rollout(self.policy, problem.prompt, context.tokens, rollout))
            except ValueError as e:
                raise ScoringError(step, problem.problem_id, index, e) from e
        return GroupResult(problem, group, privileged)

    def _collect(self, batch: Sequence[Problem], step: int) -> List[GroupResult]:
        children = np.random.SeedSequence(self.config.seed, spawn_key=(step,)).spawn(len(batch))
        rngs = [np.random.default_rng(child) for child in children]
        if self.config.workers > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                return list(pool.map(lambda args: self._rollout_group(*args, step), zip(batch, rngs)))
        return [self._rollout_group(problem, rng, step) for problem, rng in zip(batch, rngs)]

    def train_step(self, lam_override: Optional[float] = None) -> StepMetrics:
        """
        One training step.

        Samples G rollouts per prompt, verifies, builds privileged contexts,
        scores student and teacher, updates the gate from the batch entropy
        median, composes per-token advantages and applies one clipped
        policy-gradient update. ``lam_override`` pins lambda (warmup).

        Raises:
            GateNotCalibratedError: if no override is given before calibration
            ScoringError: if a rollout cannot be scored
        """
        if self.policy is None:
            self.initialize_policy()
        config = self.config
        step = self.step + 1
        results = self._collect(self._next_batch(), step)

        all_scores: List[List[TokenScore]] = [s for r in results for s in r.group.scores]
        h = batch_entropy_median(all_scores, config.gate_signal)

        if lam_override is not None:
            lam, g = float(lam_override), 0
        else:
            if self.gate is None:
                raise GateNotCalibratedError(f"Step {step} needs a calibrated gate")
            self.gate, lam = gate_step(self.gate, h)
            g = self.gate.g

        gradient = np.zeros_like(self.policy.logits)
        records: List[TraceRecord] = []
        deltas_seen, u_seen, abs_adv = [], [], []
        emit = self.trace_callback is not None
        scale = 1.0 / config.group_size

        for prompt_index, result in enumerate(results):
            group = result.group
            a_seq = seq_advantage(group.rewards)
            for index, scores in enumerate(group.scores):
                deltas = rollout_deltas(scores, config.signal)
                advantages = [compose(a_seq[index], d, lam, config.compose) for d in deltas]
                accumulate_surrogate_gradient(
                    gradient, self.policy, result.problem.prompt, group.rollouts[index],
                    advantages, [score.s for score in scores], config.clip_ratio, scale,
                )
                deltas_seen.extend(deltas)
                u_seen.extend(score.u for score in scores)
                abs_adv.extend(abs(a) for a in advantages)
                if emit:
                    for score, d, a in zip(scores, deltas, advantages):
                        records.append(TraceRecord(
                            step=step,
                            prompt_index=prompt_index,
                            prompt_id=group.prompt_id,
                            rollout=index,
                            position=score.position,
                            token=score.token,
                            s=score.s,
                            t=score.t,
                            u=score.u,
                            phi=phi(score.u),
                            delta=d,
                            a_seq=a_seq[index],
                            a_total=a,
                            gate=g,
                            lam=lam,
                            teacher_entropy=score.teacher_entropy,
                            entropy_median=h,
                            reward=group.rewards[index],
                            truncated=group.truncated[index],
                            compose=config.compose_mode,
                        ))

        self.policy.apply_update(gradient, config.learning_rate)
        self.step = step

        metrics = self._step_metrics(step, results, h, g, lam, u_seen, deltas_seen, abs_adv, gradient)
        metrics.phase = "warmup" if lam_override is not None else "train"
        self.history.append(metrics)
        if emit:
            self.trace_callback(records)
        self._after_step(metrics)
        return metrics

    def _step_metrics(self, step, results, h, g, lam, u_seen, deltas_seen, abs_adv, gradient) -> StepMetrics:
        rewards = [r for res in results for r in res.group.rewards]
        truncated = [t for res in results for t in res.group.truncated]
        lengths = [len(rollout) for res in results for rollout in res.group.rollouts]
        finished = [r for r, t in zip(rewards, truncated) if not t]
        tokens = [s for res in results for scores in res.group.scores for s in scores]
        from_group = [res.privileged[0].source is PrivilegedSource.GROUP_ROLLOUT for res in results]
        return StepMetrics(
            step=step,
            reward_mean=float(np.mean(rewards)),
            reward_nontruncated=float(np.mean(finished)) if finished else 0.0,
            nontruncated_count=len(finished),
            truncated_fraction=float(np.mean(truncated)),
            mean_length=float(np.mean(lengths)),
            student_entropy=float(np.mean([s.student_entropy for s in tokens])),
            teacher_entropy=float(np.mean([s.teacher_entropy for s in tokens])),
            entropy_median=h,
            gate=g,
            lam=lam,
            mean_u=float(np.mean(u_seen)),
            mean_delta=float(np.mean(deltas_seen)),
            mean_abs_advantage=float(np.mean(abs_adv)),
            grad_norm=float(np.linalg.norm(gradient)),
            group_solution_fraction=float(np.mean(from_group)),
        )

    def _after_step(self, metrics: StepMetrics):
        message = (
            f"Step {metrics.step}/{self.config.steps} [{metrics.phase}] reward {metrics.reward_mean:.3f} "
            f"H {metrics.entropy_median:.3f} g={metrics.gate} lambda={metrics.lam:.2f}"
        )
        self._log(message, logging.DEBUG if metrics.step % 10 else logging.INFO)
        self._update_progress(metrics.step, self.config.steps, message, force=metrics.step == self.config.steps)
        every = self.config.checkpoint_every
        if self.checkpoint_dir and every and metrics.step % every == 0:
            self.save_checkpoint()

    def warmup_and_calibrate(self, max_step: Optional[int] = None) -> Optional[GateState]:
        """
        Run the remaining warmup steps at lambda = 0 and calibrate the gate.

        Returns None when ``max_step`` or a stop request ends warmup early.
        """
        if self.policy is None:
            self.initialize_policy()
        config = self.config
        while len(self.warmup_medians) < config.warmup_steps:
            if self.should_stop or (max_step is not None and self.step >= max_step):
                return None
            metrics = self.train_step(lam_override=0.0)
            self.warmup_medians.append(metrics.entropy_median)

        self.gate = calibrate(
            self.warmup_medians,
            multiplier=config.gate_multiplier,
            lambda_max=config.lambda_max,
            signal_source=config.gate_signal,
            enabled=config.gate_enabled,
            forced_closed=config.gate_forced_closed,
        )
        self._log(
            f"✓ Gate calibrated after step {self.step}: H_warm={self.gate.h_warm:.4f}, "
            f"tau_down={self.gate.tau_down:.4f} ({config.gate_signal_source})"
        )
        if not config.gate_enabled:
            self._log("⚠ Gate disabled: lambda = lambda_max from here on")
        if config.gate_forced_closed:
            self._log("Gate forced closed: lambda = 0 (GRPO)")
        return self.gate

    def run(self) -> RunReport:
        """Train to ``config.steps``, checkpoint, evaluate and report."""
        config = self.config
        self.is_running = True
        self.should_stop = False
        self.start_time = time.time()
        self.start_step = self.step
        self._log("=" * 60)
        self._log(f"AntiSD run: arm '{config.arm}', seed {config.seed}, steps {self.step + 1}..{config.steps}")
        self._log(
            f"Signal {config.signal_mode}, compose {config.compose_mode}, "
            f"lambda_max {config.lambda_max}, G {config.group_size}, batch {config.batch_prompts}"
        )
        self._log("=" * 60)

        try:
            if self.policy is None:
                self.initialize_policy()
            if self.gate is None:
                self.warmup_and_calibrate(max_step=config.steps)
            while self.step < config.steps and not self.should_stop:
                self.train_step()
        finally:
            self.is_running = False

        if self.should_stop:
            self._log(f"⚠ Training stopped at step {self.step}")
        if self.checkpoint_dir:
            self.save_checkpoint()
        return self.build_report()

    def evaluate(self, split: str = "heldout", k: Optional[int] = None) -> Tuple[float, float, List[int]]:
        """
        avg@k and pass@k of the current policy on ``split``.

        Returns:
            Tuple of (avg@k, pass@k, per-problem correct counts)
        """
        config = self.config
        k = k or config.eval_k
        stream = EVAL_STREAM + (0 if split == "heldout" else 1,)
        counts = evaluate_counts(
            self.policy, self.task.problems(split), k, self.task, config.max_len,
            self._stream(stream), config.eval_temperature, config.eval_top_p,
        )
        avg, passed = avg_and_pass_at_k(counts)
        return avg, passed, [int(sum(row)) for row in counts]

    def build_report(self) -> RunReport:
        config = self.config
        if self.policy is None:
            self.initialize_policy()
        heldout_avg, heldout_pass, heldout_counts = self.evaluate("heldout")
        train_avg, train_pass, _ = self.evaluate("train")
        report = RunReport(
            arm=config.arm,
            seed=config.seed,
            steps=self.step,
            config_hash=config.structural_hash(),
            history=list(self.history),
            gate=self.gate.to_dict() if self.gate else {},
            heldout_avg_at_k=heldout_avg,
            heldout_pass_at_k=heldout_pass,
            train_avg_at_k=train_avg,
            train_pass_at_k=train_pass,
            eval_k=config.eval_k,
            pass_at_k_curve=pass_at_k_curve(heldout_counts, config.eval_k, default_curve_ks(config.eval_k)),
            pretrain_nll=self.pretrain_nll,
            resumed_from_step=self.resumed_from_step,
        )
        report.summarize_rewards(config.rolling_window)

        self._log("=" * 60)
        self._log(f"Run complete: {self.step} steps")
        self._log(f"  Held-out avg@{config.eval_k} {heldout_avg:.3f}, pass@{config.eval_k} {heldout_pass:.3f}")
        self._log(f"  Train avg@{config.eval_k} {train_avg:.3f}, pass@{config.eval_k} {train_pass:.3f}")
        self._log(
            f"  Rolling reward: peak {report.peak_rolling_reward:.3f}, final {report.final_rolling_reward:.3f}"
        )
        self._log("=" * 60)
        return report

    def make_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            policy=self.policy.to_dict(),
            gate=self.gate.to_dict() if self.gate else None,
            warmup_medians=list(self.warmup_medians),
            step=self.step,
            seed=self.config.seed,
            data_cursor=self.data_cursor,
            config=self.config.to_dict(),
            config_hash=self.config.structural_hash(),
            optimizer={"kind": "sgd", "learning_rate": self.config.learning_rate},
            history=[m.to_dict() for m in self.history],
            pretrain_nll=self.pretrain_nll,
        )

    def save_checkpoint(self, path: Optional[str] = None) -> str:
        """Write a checkpoint and return its path."""
        if path is None:
            if not self.checkpoint_dir:
                raise ValueError("No checkpoint directory configured")
            path = str(Path(self.checkpoint_dir) / f"checkpoint_step{self.step:05d}.json")
        checkpoint = self.make_checkpoint()
        checkpoint.save(path)
        if self.checkpoint_dir:
            checkpoint.save(str(Path(self.checkpoint_dir) / "checkpoint_latest.json"))
        self._log(f"✓ Checkpoint saved: {path}")
        return path

    def restore(self, checkpoint: Checkpoint):
        """Load policy, gate, step and data position from ``checkpoint``."""
        if checkpoint.config_hash != self.config.structural_hash():
            raise CheckpointMismatchError(
                f"Checkpoint structural hash {checkpoint.config_hash} does not match "
                f"config hash {self.config.structural_hash()}"
            )
        self.policy = TabularPolicy.from_dict(checkpoint.policy)
        self.step = checkpoint.step
        self.data_cursor = checkpoint.data_cursor
        self.history = [StepMetrics.from_dict(m) for m in checkpoint.history]
        self.pretrain_nll = checkpoint.pretrain_nll
        self.warmup_medians = list(checkpoint.warmup_medians)
        self.resumed_from_step = checkpoint.step
        self.gate = GateState.from_dict(checkpoint.gate) if checkpoint.gate else None

        changed = [
            name for name in ("arm",) + ARM_FIELDS
            if checkpoint.config.get(name) != getattr(self.config, name)
        ]
        if changed:
            self.gate = None
            self.warmup_medians = []
            self._log(
                f"Resumed at step {self.step} with changed {', '.join(changed)}; "
                f"recalibrating the gate over {self.config.warmup_steps} steps"
            )
        elif self.gate is not None:
            self.gate = dataclasses.replace(
                self.gate,
                lambda_max=self.config.lambda_max,
                enabled=self.config.gate_enabled,
                forced_closed=self.config.gate_forced_closed,
            )
            self._log(f"Resumed at step {self.step} with the stored gate (g={self.gate.g})")

    @classmethod
    def from_checkpoint(
        cls,
        checkpoint: Checkpoint,
        overrides: Sequence[str] = (),
        checkpoint_dir: Optional[str] = None,
    ) -> "Trainer":
        """
        Rebuild a trainer from a checkpoint plus ``KEY=VALUE`` overrides.

        ``steps=+N`` counts from the checkpoint's step. A checkpoint whose gate
        was forced closed (grpo) continues as the continual arm unless the
        overrides name ``arm`` or ``gate_forced_closed``. Any change of arm or
        gate fields reruns warmup and calibration after the checkpoint step.
        """
        base = TrainConfig.from_dict(checkpoint.config)
        keys = {parse_override(item)[0] for item in overrides}
        if base.gate_forced_closed and not keys & {"arm", "gate_forced_closed"}:
            overrides = ["arm=continual", *overrides]
            logger.info("Continuing the forced-closed checkpoint with the continual arm")
        config = base.with_overrides(overrides, relative_base={"steps": checkpoint.step})
        if config.structural_hash() != checkpoint.config_hash:
            raise CheckpointMismatchError(
                "Overrides change structural fields (vocabulary, context order or task)"
            )
        trainer = cls(config, checkpoint_dir)
        trainer.restore(checkpoint)
        return trainer

    def trace(self, split: str = "heldout", count: int = 16) -> Tuple[List[TraceRecord], dict]:
        """
        Score fresh rollouts without updating and summarize u by solution membership.

        Returns:
            Tuple of (trace records, summary dict)
        """
        if self.policy is None:
            self.policy = TabularPolicy(self.config.vocab_size, self.config.context_order,
                                        self.config.max_context_length)
        config = self.config
        problems = self.task.problems(split)
        rng = self._stream(TRACE_STREAM)
        lam, g = 0.0, 0
        if self.gate is not None and not self.gate.forced_closed:
            g = self.gate.g
            lam = self.gate.lambda_max if not self.gate.enabled else g * self.gate.lambda_max

        records: List[TraceRecord] = []
        member_u, other_u = [], []
        for prompt_index in range(count):
            result = self._rollout_group(problems[prompt_index % len(problems)], rng, self.step)
            group = result.group
            a_seq = seq_advantage(group.rewards)
            h = batch_entropy_median(group.scores, config.gate_signal)
            for index, scores in enumerate(group.scores):
                solution = set(result.privileged[index].solution)
                deltas = rollout_deltas(scores, config.signal)
                for score, d in zip(scores, deltas):
                    (member_u if score.token in solution else other_u).append(score.u)
                    records.append(TraceRecord(
                        step=self.step,
                        prompt_index=prompt_index,
                        prompt_id=group.prompt_id,
                        rollout=index,
                        position=score.position,
                        token=score.token,
                        s=score.s,
                        t=score.t,
                        u=score.u,
                        phi=phi(score.u),
                        delta=d,
                        a_seq=a_seq[index],
                        a_total=compose(a_seq[index], d, lam, config.compose),
                        gate=g,
                        lam=lam,
                        teacher_entropy=score.teacher_entropy,
                        entropy_median=h,
                        reward=group.rewards[index],
                        truncated=group.truncated[index],
                        compose=config.compose_mode,
                    ))

        summary = {
            "split": split,
            "groups": count,
            "rows": len(records),
            "solution_token_count": len(member_u),
            "other_token_count": len(other_u),
            "mean_u_solution_tokens": float(np.mean(member_u)) if member_u else 0.0,
            "mean_u_other_tokens": float(np.mean(other_u)) if other_u else 0.0,
        }
        return records, summary


def run(config: TrainConfig, checkpoint_dir: Optional[str] = None) -> RunReport:
    """Train one arm from scratch."""
    return Trainer(config, checkpoint_dir).run()


def resume(
    checkpoint: Checkpoint,
    overrides: Sequence[str] = (),
    checkpoint_dir: Optional[str] = None,
) -> RunReport:
    """Continue a run from ``checkpoint``; see ``Trainer.from_checkpoint``."""
    return Trainer.from_checkpoint(checkpoint, overrides, checkpoint_dir).run()


@dataclass
class ArmComparison:
    """Reports per arm and seed, plus the per-seed directional statistics."""

    reports: Dict[str, List[RunReport]] = field(default_factory=dict)
    per_seed: List[dict] = field(default_factory=list)

    def count(self, key: str) -> int:
        return sum(1 for row in self.per_seed if row.get(key))

    def to_dict(self) -> dict:
        return {
            "per_seed": self.per_seed,
            "runs": {
                arm: [
                    {
                        "seed": r.seed,
                        "rewards": r.rewards(),
                        "peak_rolling_reward": r.peak_rolling_reward,
                        "final_rolling_reward": r.final_rolling_reward,
                        "heldout_avg_at_k": r.heldout_avg_at_k,
                        "heldout_pass_at_k": r.heldout_pass_at_k,
                    }
                    for r in reports
                ]
                for arm, reports in self.reports.items()
            },
        }


def compare_arms(
    base_config: TrainConfig,
    arms: Sequence[str],
    seeds: Sequence[int],
    plateau_tolerance: float = 0.05,
    log_callback: Optional[Callable] = None,
) -> ArmComparison:
    """
    Run ``arms`` over ``seeds`` and derive speedup, polarity, collapse and
    continual-resume statistics against the grpo arm.

    The continual arm resumes the grpo run at its plateau, the first step whose
    rolling mean is within ``plateau_tolerance`` of the grpo best, and
    recalibrates the gate there.
    """
    window = base_config.rolling_window
    comparison = ArmComparison({arm: [] for arm in arms})

    def run_arm(overrides: List[str]) -> Tuple[Trainer, RunReport]:
        trainer = Trainer(base_config.with_overrides(overrides))
        if log_callback:
            trainer.set_log_callback(log_callback)
        return trainer, trainer.run()

    for seed in seeds:
        by_arm: Dict[str, RunReport] = {}
        for arm in arms:
            if arm == "continual":
                continue
            by_arm[arm] = run_arm([f"arm={arm}", f"seed={seed}"])[1]
            comparison.reports[arm].append(by_arm[arm])

        resume_step = None
        if "continual" in arms:
            grpo_rewards = (
                by_arm["grpo"].rewards() if "grpo" in by_arm
                else run_arm(["arm=grpo", f"seed={seed}"])[1].rewards()
            )
            plateau = plateau_step(grpo_rewards, window, plateau_tolerance) or 1
            resume_step = min(plateau, max(base_config.steps - 1, 1))
            head, _ = run_arm(["arm=grpo", f"seed={seed}", f"steps={resume_step}"])
            continued = Trainer.from_checkpoint(head.make_checkpoint(), ["arm=continual", f"steps={base_config.steps}"])
            if log_callback:
                continued.set_log_callback(log_callback)
            by_arm["continual"] = continued.run()
            comparison.reports["continual"].append(by_arm["continual"])

        row: Dict[str, object] = {"seed": seed}
        if resume_step is not None:
            row["continual_resume_step"] = resume_step
        grpo_report = by_arm.get("grpo")
        antisd_report = by_arm.get("antisd")
        if grpo_report and antisd_report:
            row["antisd_speedup"] = speedup(grpo_report.rewards(), antisd_report.rewards(), window)
            row["antisd_twice_as_fast"] = row["antisd_speedup"] >= 2.0
        if grpo_report and "sd" in by_arm:
            row["sd_polarity_failure"] = by_arm["sd"].final_rolling_reward <= grpo_report.final_rolling_reward
        if "no_teacher" in by_arm:
            row["no_teacher_decline"] = peak_decline(by_arm["no_teacher"].rewards(), window)
            row["no_teacher_collapse"] = row["no_teacher_decline"] >= 0.2
        if antisd_report and "continual" in by_arm:
            scratch = rolling_mean(antisd_report.rewards(), window)
            best_step = int(np.argmax(scratch)) + 1
            report = by_arm["continual"]
            after = report.rewards()[report.resumed_from_step or 0:]
            reached = first_step_reaching(rolling_mean(after, window), 0.95 * float(scratch[best_step - 1]))
            row["continual_steps_to_target"] = reached
            row["continual_within_half"] = reached is not None and reached <= 0.5 * best_step
        comparison.per_seed.append(row)
        logger.info("Seed %d: %s", seed, row)
    return comparison
