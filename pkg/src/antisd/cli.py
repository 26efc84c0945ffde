"""Command-line interface: train, trace, gradcheck, calibrate and compare."""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from tqdm import tqdm
from tqdm.contrib.logging import logging_redirect_tqdm

from . import __version__
from .config import ARM_PRESETS, ConfigError, TrainConfig, load_config
from .entropy_gate import GateNotCalibratedError
from .oracle import run_gradcheck
from .trace_io import TraceWriter, write_metrics_csv
from .trainer import (
    Checkpoint,
    CheckpointMismatchError,
    ScoringError,
    Trainer,
    compare_arms,
    verify_checkpoint_file,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CHECK_FAILED = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    """Bad command-line usage; exits with EXIT_USAGE."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _output_dir(args) -> Path:
    out = Path(os.environ.get("ANTISD_OUT") or args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args) -> TrainConfig:
    config = load_config(args.config) if args.config else TrainConfig()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return config.with_overrides(overrides)


def _load_checkpoint(path: str) -> Checkpoint:
    ok, message = verify_checkpoint_file(path)
    if not ok:
        raise UsageError(message)
    return Checkpoint.load(path)


def _write_json(path: Path, data: dict):
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _attach_progress(trainer: Trainer, disable: bool) -> tqdm:
    bar = tqdm(total=trainer.config.steps, initial=trainer.step, unit="step", disable=disable)
    trainer.progress_update_interval = 0.2

    def on_progress(current: int, total: int, message: str):
        bar.total = total
        bar.n = current
        bar.set_postfix_str(message.split(" | ")[0].split("] ")[-1], refresh=False)
        bar.refresh()

    trainer.set_progress_callback(on_progress)
    return bar


def cmd_train(args) -> int:
    out = _output_dir(args)
    checkpoint_dir = str(out / "checkpoints")
    if args.resume:
        checkpoint = _load_checkpoint(args.resume)
        overrides = list(args.set or [])
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        trainer = Trainer.from_checkpoint(checkpoint, overrides, checkpoint_dir)
    else:
        trainer = Trainer(_load_config(args), checkpoint_dir)

    config = trainer.config
    (out / "config.json").write_text(config.to_json() + "\n", encoding="utf-8")
    bar = _attach_progress(trainer, args.no_progress)
    with TraceWriter(str(out / "trace.csv")) as writer, logging_redirect_tqdm():
        trainer.set_trace_callback(writer.write)
        try:
            report = trainer.run()
        finally:
            bar.close()

    write_metrics_csv(str(out / "metrics.csv"), report.history)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    print(f"✓ {config.arm}: {report.steps} steps, held-out avg@{report.eval_k} "
          f"{report.heldout_avg_at_k:.3f}, pass@{report.eval_k} {report.heldout_pass_at_k:.3f}")
    print(f"  Artifacts in {out}")
    return EXIT_OK


def cmd_trace(args) -> int:
    out = _output_dir(args)
    if args.resume:
        checkpoint = _load_checkpoint(args.resume)
        trainer = Trainer.from_checkpoint(checkpoint, list(args.set or []))
    else:
        trainer = Trainer(_load_config(args))

    records, summary = trainer.trace(args.split, args.count)
    trace_path = out / "token_trace.csv"
    with TraceWriter(str(trace_path)) as writer:
        writer.write(records)
    _write_json(out / "token_trace_summary.json", summary)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    out = _output_dir(args)
    seed = args.seed if args.seed is not None else TrainConfig().property_seed
    report = run_gradcheck(trials=args.trials, seed=seed)
    (out / "gradcheck.json").write_text(report.to_json() + "\n", encoding="utf-8")
    for check in report.checks:
        print(check.message)
    if not report.passed:
        print(f"✗ Failed checks: {', '.join(report.failures)}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    print(f"✓ All {len(report.checks)} checks passed ({args.trials} trials)")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    out = _output_dir(args)
    trainer = Trainer(_load_config(args))
    gate = trainer.warmup_and_calibrate()
    result = {
        "h_warm": gate.h_warm,
        "tau_down": gate.tau_down,
        "multiplier": gate.multiplier,
        "warmup_medians": list(gate.warmup_medians),
        "signal_source": gate.signal_source.value,
    }
    _write_json(out / "calibration.json", result)
    print(f"{gate.h_warm:.10g} {gate.tau_down:.10g}")
    return EXIT_OK


def cmd_compare(args) -> int:
    out = _output_dir(args)
    config = _load_config(args)
    arms = args.arms or ["grpo", "antisd", "sd", "no_teacher", "continual"]
    unknown = [arm for arm in arms if arm not in ARM_PRESETS]
    if unknown:
        raise UsageError(f"Unknown arms: {', '.join(unknown)}")
    seeds = list(range(args.seeds))
    with logging_redirect_tqdm():
        comparison = compare_arms(config, arms, seeds)
    _write_json(out / "compare.json", comparison.to_dict())
    for key in ("antisd_twice_as_fast", "sd_polarity_failure", "no_teacher_collapse", "continual_within_half"):
        if any(key in row for row in comparison.per_seed):
            print(f"{key}: {comparison.count(key)}/{len(seeds)} seeds")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="antisd", description="AntiSD training and verification at desk scale")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config document")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config field (repeatable)")
    common.add_argument("--out", default="runs", help="Output directory (ANTISD_OUT overrides)")
    common.add_argument("--seed", type=int, help="Run seed")

    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    train = sub.add_parser("train", parents=[common], help="Train one arm")
    train.add_argument("--resume", metavar="PATH", help="Continue from a checkpoint")
    train.add_argument("--no-progress", action="store_true", help="Hide the progress bar")
    train.set_defaults(handler=cmd_train)

    trace = sub.add_parser("trace", parents=[common], help="Emit per-token scores of fresh rollouts")
    trace.add_argument("--resume", "--checkpoint", dest="resume", metavar="PATH", help="Checkpoint to trace")
    trace.add_argument("--split", default="heldout", choices=["train", "heldout"])
    trace.add_argument("--count", type=int, default=16, help="Number of rollout groups")
    trace.set_defaults(handler=cmd_trace)

    gradcheck = sub.add_parser("gradcheck", parents=[common], help="Run the oracle checks")
    gradcheck.add_argument("--trials", type=int, default=100)
    gradcheck.set_defaults(handler=cmd_gradcheck)

    calibrate = sub.add_parser("calibrate", parents=[common], help="Run warmup and print H_warm, tau_down")
    calibrate.set_defaults(handler=cmd_calibrate)

    compare = sub.add_parser("compare", parents=[common], help="Run several arms across seeds")
    compare.add_argument("--arms", nargs="+", help="Arm presets to run")
    compare.add_argument("--seeds", type=int, default=5, help="Number of seeds (0..N-1)")
    compare.set_defaults(handler=cmd_compare)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, dispatch, and map errors to exit codes."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "trials", 1) < 1:
        print("✗ --trials must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "count", 1) < 1:
        print("✗ --count must be at least 1", file=sys.stderr)
        return EXIT_USAGE

    try:
        return args.handler(args)
    except (ConfigError, CheckpointMismatchError, UsageError) as e:
        print(f"✗ {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ScoringError, GateNotCalibratedError) as e:
        print(f"✗ {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError, ValueError) as e:
        logger.exception("Unexpected failure")
        print(f"✗ {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
