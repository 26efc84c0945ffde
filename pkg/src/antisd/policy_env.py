"""Tabular autoregressive policy, verifiable-reward tasks and privileged-context assembly."""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .core_math import Categorical

if TYPE_CHECKING:
    from .grpo_advantage import GroupBatch

logger = logging.getLogger(__name__)

# Reserved token ids; every id from NUM_SPECIAL_TOKENS upward is content.
BOS = 0
EOS = 1
ANS = 2
SOL = 3
FB = 4
CORRECT = 5
INCORRECT = 6
NUM_SPECIAL_TOKENS = 7

TOKEN_NAMES = {
    BOS: "<bos>",
    EOS: "<eos>",
    ANS: "<ans>",
    SOL: "<sol>",
    FB: "<fb>",
    CORRECT: "<correct>",
    INCORRECT: "<incorrect>",
}


class UnknownTokenError(ValueError):
    """Raised when a context holds a token id outside the vocabulary."""


class ContextWindowError(ValueError):
    """Raised when a scoring context grows past the policy's window."""

    def __init__(self, position: int, length: int, limit: int):
        super().__init__(
            f"Context of length {length} at rollout position {position} "
            f"exceeds the policy window of {limit} tokens"
        )
        self.position = position
        self.length = length
        self.limit = limit


@dataclass(frozen=True)
class SparseGradient:
    """Gradient that is nonzero on a single logit row."""

    row: int
    values: np.ndarray


class TabularPolicy:
    """
    Dense tabular softmax over the last ``context_order`` tokens.

    One logit row per window of k tokens (V^k rows of V logits). Contexts
    shorter than k are left-padded with BOS. Row distributions are cached
    until the next ``apply_update``; edit ``logits`` directly only before the
    first lookup.
    """

    def __init__(
        self,
        vocab_size: int = 16,
        context_order: int = 2,
        max_context_length: int = 64,
        logits: Optional[np.ndarray] = None,
        step: int = 0,
    ):
        """
        Initialize the policy.

        Args:
            vocab_size: Number of token ids (specials included)
            context_order: Number of trailing context tokens the policy reads
            max_context_length: Longest context a scorer may assemble
            logits: Optional (V^k, V) logit table; zeros (uniform) by default
            step: Update counter
        """
        if vocab_size <= NUM_SPECIAL_TOKENS:
            raise ValueError(
                f"vocab_size must exceed the {NUM_SPECIAL_TOKENS} reserved tokens"
            )
        if context_order < 1:
            raise ValueError("context_order must be at least 1")

        self.vocab_size = vocab_size
        self.context_order = context_order
        self.max_context_length = max_context_length
        shape = (vocab_size ** context_order, vocab_size)
        if logits is None:
            self.logits = np.zeros(shape, dtype=np.float64)
        else:
            self.logits = np.array(logits, dtype=np.float64).reshape(shape)
        self.step = step
        self._rows: Dict[int, Tuple[Categorical, np.ndarray]] = {}

    @property
    def parameter_count(self) -> int:
        return int(self.logits.size)

    def window_index(self, context: Sequence[int]) -> int:
        """Row index of the last-k window of ``context``."""
        window = list(context[-self.context_order:])
        window = [BOS] * (self.context_order - len(window)) + window
        index = 0
        for token in window:
            if not 0 <= int(token) < self.vocab_size:
                raise UnknownTokenError(
                    f"Token id {token} outside vocabulary of size {self.vocab_size}"
                )
            index = index * self.vocab_size + int(token)
        return index

    def _row(self, row: int) -> Tuple[Categorical, np.ndarray]:
        # (floor-clamped distribution, unclamped softmax)
        cached = self._rows.get(row)
        if cached is None:
            logits = self.logits[row]
            probs = np.exp(logits - np.logaddexp.reduce(logits))
            cached = (Categorical.from_logits(logits), probs)
            self._rows[row] = cached
        return cached

    def next_dist(self, context: Sequence[int]) -> Categorical:
        """Next-token distribution for ``context``, floor-clamped."""
        return self._row(self.window_index(context))[0]

    def grad_log_prob(self, context: Sequence[int], token: int) -> SparseGradient:
        """
        Exact score gradient of log pi(token | context) w.r.t. the logits.

        Returns one-hot(token) - probs on the active row (unclamped softmax).
        """
        row = self.window_index(context)
        if not 0 <= token < self.vocab_size:
            raise UnknownTokenError(f"Token id {token} outside vocabulary")
        values = -self._row(row)[1]
        values[token] += 1.0
        return SparseGradient(row, values)

    def apply_update(self, gradient: np.ndarray, learning_rate: float):
        """Plain gradient ascent step on the logit table."""
        self.logits += learning_rate * gradient
        self.step += 1
        self._rows.clear()

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(
            self.vocab_size,
            self.context_order,
            self.max_context_length,
            self.logits.copy(),
            self.step,
        )

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "context_order": self.context_order,
            "max_context_length": self.max_context_length,
            "step": self.step,
            "logits": self.logits.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TabularPolicy":
        return cls(
            vocab_size=data["vocab_size"],
            context_order=data["context_order"],
            max_context_length=data["max_context_length"],
            logits=np.asarray(data["logits"], dtype=np.float64),
            step=data["step"],
        )


def sample_token(
    dist: Categorical,
    rng: np.random.Generator,
    temperature: float = 1.0,
    top_p: float = 1.0,
) -> int:
    """Draw one token with temperature and nucleus truncation."""
    if temperature <= 0:
        return int(np.argmax(dist.log_probs))
    if temperature == 1.0:
        probs = dist.probs
    else:
        scaled = dist.log_probs / temperature
        probs = np.exp(scaled - np.logaddexp.reduce(scaled))
    if top_p < 1.0:
        order = np.argsort(-probs, kind="stable")
        cumulative = np.cumsum(probs[order])
        keep = int(np.searchsorted(cumulative, top_p) + 1)
        mask = np.zeros_like(probs)
        mask[order[:keep]] = 1.0
        probs = probs * mask
        probs /= probs.sum()
    cumulative = np.cumsum(probs)
    draw = rng.random() * cumulative[-1]
    return int(min(np.searchsorted(cumulative, draw, side="right"), len(probs) - 1))


def sample_rollout(
    policy: TabularPolicy,
    prompt: Sequence[int],
    max_len: int,
    rng: np.random.Generator,
    temperature: float = 1.0,
    top_p: float = 1.0,
) -> Tuple[List[int], bool]:
    """
    Ancestral sampling until EOS or ``max_len`` tokens.

    Returns:
        Tuple of (rollout tokens, truncated flag)
    """
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    context = list(prompt)
    rollout: List[int] = []
    for _ in range(max_len):
        token = sample_token(policy.next_dist(context), rng, temperature, top_p)
        rollout.append(token)
        context.append(token)
        if token == EOS:
            return rollout, False
    return rollout, True


def split_answer(rollout: Sequence[int]) -> Optional[Tuple[Tuple[int, ...], Tuple[int, ...]]]:
    """
    Split a finished rollout into (derivation prefix, answer segment).

    The answer segment is everything between the last ANS marker and the
    terminating EOS. Returns None for rollouts without ANS or EOS.
    """
    if not rollout or rollout[-1] != EOS:
        return None
    body = list(rollout[:-1])
    if EOS in body or ANS not in body:
        return None
    ans_index = len(body) - 1 - body[::-1].index(ANS)
    return tuple(body[:ans_index]), tuple(body[ans_index + 1:])


@dataclass(frozen=True)
class Problem:
    """One prompt with its deterministic reference answer."""

    problem_id: int
    prompt: Tuple[int, ...]
    solution: Tuple[int, ...]
    roots: Tuple[Tuple[int, ...], ...] = ()

    @property
    def reference_rollout(self) -> Tuple[int, ...]:
        prefix = self.roots[0] if self.roots else ()
        return prefix + (ANS,) + self.solution + (EOS,)

    def to_dict(self) -> dict:
        return {
            "problem_id": self.problem_id,
            "prompt": list(self.prompt),
            "solution": list(self.solution),
            "roots": [list(root) for root in self.roots],
        }


@dataclass
class Task:
    """
    Synthetic verifiable-reward task.

    keyed_recall: prompt BOS + key, reward 1 iff the answer segment equals a
    seeded chain: the first answer token hashes the key, every later token
    hashes the one before it. multi_root: same answer, but the derivation
    prefix before ANS must be one of several accepted root tokens.

    With a single-token key every reference rollout of keyed_recall fits a
    window of two tokens without conflicts (see ``solvable_fraction``).
    """

    name: str = "keyed_recall"
    vocab_size: int = 16
    key_length: int = 1
    solution_length: int = 2
    seed: int = 0
    num_train: int = 6
    num_heldout: int = 3
    num_roots: int = 3
    _splits: Dict[str, List[Problem]] = field(default_factory=dict, init=False, repr=False, compare=False)

    TASK_NAMES = ("keyed_recall", "multi_root")

    def __post_init__(self):
        if self.name not in self.TASK_NAMES:
            raise ValueError(f"Unknown task '{self.name}', expected one of {self.TASK_NAMES}")
        if self.key_length < 1 or self.solution_length < 1:
            raise ValueError("key_length and solution_length must be positive")
        if self.name == "multi_root" and not 1 <= self.num_roots <= self.num_content_tokens:
            raise ValueError("num_roots must be between 1 and the number of content tokens")
        if self.num_train + self.num_heldout > self.num_content_tokens ** self.key_length:
            raise ValueError(
                f"Only {self.num_content_tokens ** self.key_length} distinct keys available "
                f"for {self.num_train + self.num_heldout} problems"
            )

    @property
    def num_content_tokens(self) -> int:
        return self.vocab_size - NUM_SPECIAL_TOKENS

    def _digest(self, label: str, key: Sequence[int], size: int) -> bytes:
        text = f"{self.name}:{self.seed}:{label}:{','.join(map(str, key))}"
        return hashlib.blake2b(text.encode("utf-8"), digest_size=max(size, 1)).digest()

    def _content_token(self, label: str, key: Sequence[int]) -> int:
        return NUM_SPECIAL_TOKENS + self._digest(label, key, 1)[0] % self.num_content_tokens

    def solution_for(self, key: Sequence[int]) -> Tuple[int, ...]:
        """Deterministic pseudorandom answer chain for ``key``."""
        solution = [self._content_token("solution", key)]
        while len(solution) < self.solution_length:
            solution.append(self._content_token("next", solution[-1:]))
        return tuple(solution)

    def roots_for(self, key: Sequence[int]) -> Tuple[Tuple[int, ...], ...]:
        """Accepted derivation prefixes (multi_root only)."""
        if self.name != "multi_root":
            return ()
        digest = self._digest("roots", key, 32)
        roots: List[int] = []
        for byte in digest:
            token = NUM_SPECIAL_TOKENS + byte % self.num_content_tokens
            if token not in roots:
                roots.append(token)
            if len(roots) == self.num_roots:
                break
        # Digest too short to yield enough distinct tokens: fill in order.
        for token in range(NUM_SPECIAL_TOKENS, self.vocab_size):
            if len(roots) == self.num_roots:
                break
            if token not in roots:
                roots.append(token)
        return tuple((token,) for token in roots)

    def _build_splits(self):
        rng = np.random.default_rng(self.seed)
        wanted = self.num_train + self.num_heldout
        keys: List[Tuple[int, ...]] = []
        seen = set()
        while len(keys) < wanted:
            key = tuple(
                int(NUM_SPECIAL_TOKENS + v)
                for v in rng.integers(0, self.num_content_tokens, size=self.key_length)
            )
            if key not in seen:
                seen.add(key)
                keys.append(key)
        problems = [
            Problem(
                problem_id=index,
                prompt=(BOS,) + key,
                solution=self.solution_for(key),
                roots=self.roots_for(key),
            )
            for index, key in enumerate(keys)
        ]
        self._splits = {
            "train": problems[: self.num_train],
            "heldout": problems[self.num_train:],
        }

    def problems(self, split: str = "train") -> List[Problem]:
        """Problem set for ``split`` ('train' or 'heldout')."""
        if not self._splits:
            self._build_splits()
        if split not in self._splits:
            raise ValueError(f"Unknown split '{split}', expected 'train' or 'heldout'")
        return self._splits[split]

    def verify(self, prompt: Sequence[int], rollout: Sequence[int]) -> int:
        """Binary verifiable reward; malformed rollouts score 0."""
        parts = split_answer(rollout)
        if parts is None:
            return 0
        prefix, answer = parts
        key = tuple(prompt[1:]) if prompt and prompt[0] == BOS else tuple(prompt)
        if answer != self.solution_for(key):
            return 0
        if self.name == "multi_root" and prefix not in self.roots_for(key):
            return 0
        return 1

    def all_problems(self) -> List[Problem]:
        return self.problems("train") + self.problems("heldout")

    def reference_windows(self, context_order: int) -> Dict[Tuple[int, ...], Set[int]]:
        """Next tokens the reference rollouts demand from every last-k window."""
        targets: Dict[Tuple[int, ...], Set[int]] = {}
        for problem in self.all_problems():
            for window, token in _rollout_windows(problem, context_order):
                targets.setdefault(window, set()).add(token)
        return targets

    def solvable_fraction(self, context_order: int) -> float:
        """
        Share of problems whose reference rollout a deterministic last-k table
        can emit: none of its windows is asked for two different tokens.
        """
        targets = self.reference_windows(context_order)
        problems = self.all_problems()
        solvable = sum(
            all(len(targets[window]) == 1 for window, _ in _rollout_windows(problem, context_order))
            for problem in problems
        )
        return solvable / len(problems) if problems else 1.0

    def to_dict(self, include_problems: bool = True) -> dict:
        data = {
            "name": self.name,
            "vocab_size": self.vocab_size,
            "key_length": self.key_length,
            "solution_length": self.solution_length,
            "seed": self.seed,
            "num_train": self.num_train,
            "num_heldout": self.num_heldout,
            "num_roots": self.num_roots,
        }
        if include_problems:
            data["problems"] = {
                split: [problem.to_dict() for problem in self.problems(split)]
                for split in ("train", "heldout")
            }
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "Task":
        fields = {k: v for k, v in data.items() if k != "problems"}
        return cls(**fields)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _rollout_windows(problem: Problem, context_order: int):
    path = [BOS] * context_order + list(problem.prompt) + list(problem.reference_rollout)
    for position in range(context_order + len(problem.prompt), len(path)):
        yield tuple(path[position - context_order:position]), path[position]


class PrivilegedSource(str, Enum):
    GROUP_ROLLOUT = "group_rollout"
    DATASET_REFERENCE = "dataset_reference"
    NONE = "none"


@dataclass(frozen=True)
class PrivilegedContext:
    """SOL + verified solution + FB + feedback token, as a token sequence."""

    tokens: Tuple[int, ...]
    source: PrivilegedSource
    solution: Tuple[int, ...] = ()

    @classmethod
    def empty(cls) -> "PrivilegedContext":
        return cls((), PrivilegedSource.NONE)


def build_privileged(
    group: "GroupBatch",
    task: Task,
    problem: Problem,
    rollout_index: int,
    no_teacher: bool = False,
) -> PrivilegedContext:
    """
    Assemble the teacher's privileged context for one rollout of a group.

    The verified solution is the answer of the lowest-index correct rollout,
    else the dataset reference. The feedback token reports the correctness of
    the rollout being scored.
    """
    if no_teacher:
        return PrivilegedContext.empty()

    source = PrivilegedSource.DATASET_REFERENCE
    solution = problem.solution
    for rollout, reward in zip(group.rollouts, group.rewards):
        if reward >= 1:
            parts = split_answer(rollout)
            if parts is not None and task.verify(problem.prompt, rollout) == 1:
                solution = parts[1]
                source = PrivilegedSource.GROUP_ROLLOUT
                break

    feedback = CORRECT if group.rewards[rollout_index] >= 1 else INCORRECT
    tokens = (SOL,) + tuple(solution) + (FB, feedback)
    return PrivilegedContext(tokens, source, tuple(solution))


def pretrain(
    policy: TabularPolicy,
    task: Task,
    steps: int,
    learning_rate: float,
    noise: float,
    rng: np.random.Generator,
) -> float:
    """
    Supervised warm start on corrupted reference rollouts.

    Demonstrations cover both splits, so held-out prompts start from the
    same partial competence as train prompts. Each answer token of a
    demonstration is replaced by a random content token with probability
    ``noise``. Every demonstration is fitted in the bare format and in the
    enriched teacher format whose feedback token states the demonstration's
    correctness.

    Returns:
        Mean negative log-likelihood of the last pretraining step
    """
    problems = task.all_problems()
    mean_nll = 0.0
    for step in range(steps):
        gradient = np.zeros_like(policy.logits)
        total_nll = 0.0
        count = 0
        for problem in problems:
            answer = tuple(
                int(NUM_SPECIAL_TOKENS + rng.integers(task.num_content_tokens))
                if rng.random() < noise else token
                for token in problem.solution
            )
            prefix = problem.roots[0] if problem.roots else ()
            demo = prefix + (ANS,) + answer + (EOS,)
            feedback = CORRECT if answer == problem.solution else INCORRECT
            privileged = (SOL,) + problem.solution + (FB, feedback)
            for head in (problem.prompt, problem.prompt + privileged):
                for position, token in enumerate(demo):
                    context = head + demo[:position]
                    grad = policy.grad_log_prob(context, token)
                    gradient[grad.row] += grad.values
                    total_nll -= policy.next_dist(context).log_prob(token)
                    count += 1
        policy.apply_update(gradient, learning_rate)
        mean_nll = total_nll / max(count, 1)
        if (step + 1) % 50 == 0:
            logger.debug("Pretrain step %d: mean NLL %.4f", step + 1, mean_nll)
    # Warm start is not counted as training steps.
    policy.step = 0
    return mean_nll


def render_tokens(tokens: Sequence[int]) -> str:
    """Human-readable token string for logs and trace summaries."""
    return " ".join(TOKEN_NAMES.get(int(t), str(int(t))) for t in tokens)
