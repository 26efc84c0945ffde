"""Training configuration, arm presets and override parsing."""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

from .entropy_gate import GateSignal
from .grpo_advantage import ComposeMode
from .pmi_signal import SignalMode
from .policy_env import Task


class ConfigError(ValueError):
    """Invalid configuration field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"Invalid config field '{field}': {message}")
        self.field = field


# Fields that change parameter shapes or the problem set; resume requires a match.
STRUCTURAL_FIELDS = (
    "task_name",
    "vocab_size",
    "context_order",
    "key_length",
    "solution_length",
    "num_train",
    "num_heldout",
    "num_roots",
    "task_seed",
    "max_context_length",
)

# Fields an arm preset may set; switching arms resets them to their defaults first.
ARM_FIELDS = (
    "signal_mode",
    "compose_mode",
    "gate_enabled",
    "gate_forced_closed",
    "gate_signal_source",
    "gate_multiplier",
    "recalibrate_on_resume",
)


@dataclass
class TrainConfig:
    """Every knob of the AntiSD training step and the ablation axes."""

    arm: str = "antisd"

    # Optimization
    learning_rate: float = 0.05
    steps: int = 300
    batch_prompts: int = 16
    group_size: int = 8
    clip_ratio: float = 0.2
    max_len: int = 12

    # Per-token signal and gate
    lambda_max: float = 0.5
    warmup_steps: int = 5
    gate_multiplier: float = 0.93
    signal_mode: str = SignalMode.JSD_ASCENT.value
    compose_mode: str = ComposeMode.ADDITIVE.value
    gate_enabled: bool = True
    gate_forced_closed: bool = False
    gate_signal_source: str = GateSignal.TEACHER_ENTROPY.value
    recalibrate_on_resume: bool = False

    # Task and policy
    task_name: str = "keyed_recall"
    vocab_size: int = 16
    context_order: int = 2
    key_length: int = 1
    solution_length: int = 2
    num_train: int = 6
    num_heldout: int = 3
    num_roots: int = 3
    task_seed: int = 0
    max_context_length: int = 64

    # Warm start
    pretrain_steps: int = 150
    pretrain_noise: float = 0.5
    pretrain_lr: float = 0.1

    # Sampling and evaluation
    train_temperature: float = 1.0
    train_top_p: float = 1.0
    eval_temperature: float = 0.7
    eval_top_p: float = 0.95
    eval_k: int = 16

    # Run plumbing
    seed: int = 0
    property_seed: int = 1234
    checkpoint_every: int = 50
    rolling_window: int = 20
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        """Check ranges and enum values, raising ConfigError naming the field."""
        if self.group_size < 2:
            raise ConfigError("group_size", "must be at least 2")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps", "must be at least 1")
        if self.lambda_max < 0:
            raise ConfigError("lambda_max", "must be nonnegative")
        if self.clip_ratio <= 0:
            raise ConfigError("clip_ratio", "must be positive")
        if not 0.0 < self.gate_multiplier < 1.0:
            raise ConfigError("gate_multiplier", "must lie in (0, 1)")
        if self.steps < 0:
            raise ConfigError("steps", "must be nonnegative")
        if self.batch_prompts < 1:
            raise ConfigError("batch_prompts", "must be at least 1")
        if self.max_len < 1:
            raise ConfigError("max_len", "must be at least 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate", "must be positive")
        if self.eval_k < 1:
            raise ConfigError("eval_k", "must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers", "must be at least 1")
        if self.rolling_window < 1:
            raise ConfigError("rolling_window", "must be at least 1")
        if not 0.0 <= self.pretrain_noise <= 1.0:
            raise ConfigError("pretrain_noise", "must lie in [0, 1]")
        for name, enum in (
            ("signal_mode", SignalMode),
            ("compose_mode", ComposeMode),
            ("gate_signal_source", GateSignal),
        ):
            value = getattr(self, name)
            allowed = [member.value for member in enum]
            if value not in allowed:
                raise ConfigError(name, f"'{value}' is not one of {allowed}")
        if self.task_name not in Task.TASK_NAMES:
            raise ConfigError("task_name", f"'{self.task_name}' is not one of {list(Task.TASK_NAMES)}")

    @property
    def signal(self) -> SignalMode:
        return SignalMode(self.signal_mode)

    @property
    def compose(self) -> ComposeMode:
        return ComposeMode(self.compose_mode)

    @property
    def gate_signal(self) -> GateSignal:
        return GateSignal(self.gate_signal_source)

    def make_task(self) -> Task:
        try:
            return Task(
                name=self.task_name,
                vocab_size=self.vocab_size,
                key_length=self.key_length,
                solution_length=self.solution_length,
                seed=self.task_seed,
                num_train=self.num_train,
                num_heldout=self.num_heldout,
                num_roots=self.num_roots,
            )
        except ValueError as e:
            raise ConfigError("task_name", str(e)) from e

    def structural_hash(self) -> str:
        payload = {name: getattr(self, name) for name in STRUCTURAL_FIELDS}
        text = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        """
        Build a config from a JSON-like mapping.

        An ``arm`` key applies that preset first; explicit keys override it.
        """
        known = {f.name: f for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown field")

        values: Dict[str, object] = {}
        arm = data.get("arm", "antisd")
        if arm not in ARM_PRESETS:
            raise ConfigError("arm", f"'{arm}' is not one of {sorted(ARM_PRESETS)}")
        values.update(ARM_PRESETS[arm][0])
        values["arm"] = arm

        for key, value in data.items():
            values[key] = _check_type(known[key], value)
        return cls(**values)

    @classmethod
    def for_arm(cls, arm: str, **overrides) -> "TrainConfig":
        return cls.from_dict({"arm": arm, **overrides})

    def with_overrides(
        self,
        overrides: Iterable[str],
        relative_base: Optional[Dict[str, float]] = None,
    ) -> "TrainConfig":
        """
        Apply ``KEY=VALUE`` strings.

        A numeric value prefixed with '+' is added to ``relative_base[KEY]``
        (or to the current value when no base is given).
        """
        known = {f.name: f for f in fields(self)}
        data = self.to_dict()
        for item in overrides:
            key, value = parse_override(item)
            if key not in known:
                raise ConfigError(key, "unknown field")
            parsed = _parse_value(known[key], value)
            if value.startswith("+") and isinstance(parsed, (int, float)) and not isinstance(parsed, bool):
                base = (relative_base or {}).get(key, data[key])
                parsed = type(parsed)(base + parsed)
            if key == "arm":
                if parsed not in ARM_PRESETS:
                    raise ConfigError("arm", f"'{parsed}' is not one of {sorted(ARM_PRESETS)}")
                defaults = TrainConfig()
                data.update({name: getattr(defaults, name) for name in ARM_FIELDS})
                data.update(ARM_PRESETS[parsed][0])
            data[key] = parsed
        return TrainConfig(**data)


# Arm presets: (field overrides, description)
ARM_PRESETS: Dict[str, Tuple[Dict[str, object], str]] = {
    "antisd": ({}, "JSD ascent, additive, entropy-gated (canonical)"),
    "grpo": ({"gate_forced_closed": True}, "GRPO baseline: lambda pinned to 0"),
    "sd": (
        {"signal_mode": SignalMode.SD_REVERSE_KL_DESCENT.value, "gate_enabled": False},
        "Default self-distillation, delta = +u, always on",
    ),
    "rkl_ascent": (
        {"signal_mode": SignalMode.REVERSE_KL_ASCENT.value},
        "Reverse-KL ascent, delta = -u, gated",
    ),
    "no_gate": ({"gate_enabled": False}, "JSD ascent with lambda = lambda_max always"),
    "no_teacher": (
        {"signal_mode": SignalMode.NO_TEACHER.value},
        "Signal from student log-prob only, no privileged context",
    ),
    "multiplicative": (
        {"compose_mode": ComposeMode.MULTIPLICATIVE.value},
        "a_seq * (1 + lambda * delta)",
    ),
    "student_gate": (
        {"gate_signal_source": GateSignal.STUDENT_ENTROPY.value},
        "Gate driven by student entropy",
    ),
    "tau_090": ({"gate_multiplier": 0.90}, "Looser deactivation threshold"),
    "tau_095": ({"gate_multiplier": 0.95}, "Tighter deactivation threshold"),
    "continual": (
        {"recalibrate_on_resume": True},
        "AntiSD resumed from a checkpoint with gate recalibration",
    ),
    "distill_only": (
        {
            "signal_mode": SignalMode.SD_REVERSE_KL_DESCENT.value,
            "compose_mode": ComposeMode.TOKEN_ONLY.value,
            "gate_enabled": False,
        },
        "Pure on-policy self-distillation, no sequence reward term",
    ),
}


def parse_override(item: str) -> Tuple[str, str]:
    """Split ``KEY=VALUE``."""
    if "=" not in item:
        raise ConfigError(item, "override must look like KEY=VALUE")
    key, value = item.split("=", 1)
    return key.strip(), value.strip()


_KINDS = {"int": int, "float": float, "bool": bool, "str": str}


def _kind(item: dataclasses.Field) -> type:
    return item.type if isinstance(item.type, type) else _KINDS[item.type]


def _parse_value(item: dataclasses.Field, raw: str):
    kind = _kind(item)
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(item.name, f"cannot parse '{raw}' as {kind.__name__}") from None
    return raw


def _check_type(item: dataclasses.Field, value):
    kind = _kind(item)
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, bool):
        raise ConfigError(item.name, "expected int, got bool")
    if not isinstance(value, kind):
        raise ConfigError(item.name, f"expected {kind.__name__}, got {type(value).__name__}")
    return value


def load_config(path: str) -> TrainConfig:
    """Read a JSON config document."""
    file_path = Path(path)
    if not file_path.exists():
        raise ConfigError("config", f"file not found: {path}")
    try:
        data = json.loads(file_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be an object")
    return TrainConfig.from_dict(data)


def save_config(config: TrainConfig, path: str):
    Path(path).write_text(config.to_json() + "\n", encoding="utf-8")
