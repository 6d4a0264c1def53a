"""Synthetic sequence tasks with exact-match-gradable answers.

Token id 0 is reserved for the mask; content tokens occupy 1..vocab_size-1.
Prompts are hashed into disjoint train/held-out pools, so the two splits
can never share a prompt no matter how many are drawn from each.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

KINDS = ("copy", "reverse", "modular_sum")
_HELDOUT_BUCKET = 0
_N_BUCKETS = 16


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    vocab_size: int = 32
    prompt_len: int = 16
    answer_len: int = 16
    modulus: int | None = None
    train_seed: int = 1
    heldout_seed: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.vocab_size < 3 or self.prompt_len < 1 or self.answer_len < 1:
            raise ConfigError("degenerate task dimensions")
        if self.kind in ("copy", "reverse") and self.answer_len != self.prompt_len:
            raise ConfigError(f"{self.kind} needs answer_len == prompt_len")
        if self.kind == "modular_sum":
            if self.modulus is None or self.modulus < 2:
                raise ConfigError("modular_sum needs modulus >= 2")
            if self.modulus > self.vocab_size - 1:
                raise ConfigError("modulus exceeds the content alphabet")
            if self.answer_len != 1:
                raise ConfigError("modular_sum answers are a single token")

    @property
    def content_low(self) -> int:
        return 1

    @property
    def content_high(self) -> int:
        # exclusive; digits for modular_sum, full alphabet otherwise
        if self.kind == "modular_sum":
            return 1 + self.modulus
        return self.vocab_size


def answer_for(spec: TaskSpec, prompt) -> tuple[int, ...]:
    """The task's deterministic answer for a prompt."""
    prompt = tuple(int(t) for t in prompt)
    if spec.kind == "copy":
        return prompt
    if spec.kind == "reverse":
        return prompt[::-1]
    digits = [t - 1 for t in prompt]
    return (1 + sum(digits) % spec.modulus,)


def _split_bucket(prompt) -> int:
    digest = hashlib.sha256(np.asarray(prompt, dtype=np.uint32).tobytes()).digest()
    return digest[0] % _N_BUCKETS


def _draw_prompt(spec: TaskSpec, rng: np.random.Generator) -> tuple[int, ...]:
    return tuple(
        int(t)
        for t in rng.integers(spec.content_low, spec.content_high, size=spec.prompt_len)
    )


def generate_task(spec: TaskSpec, n: int, rng: np.random.Generator):
    """n (prompt, answer) pairs drawn uniformly, no split restriction."""
    out = []
    for _ in range(n):
        prompt = _draw_prompt(spec, rng)
        out.append((prompt, answer_for(spec, prompt)))
    return out


def _split_pairs(spec: TaskSpec, n: int, rng: np.random.Generator, heldout: bool):
    out = []
    guard = 0
    while len(out) < n:
        prompt = _draw_prompt(spec, rng)
        if (_split_bucket(prompt) == _HELDOUT_BUCKET) == heldout:
            out.append((prompt, answer_for(spec, prompt)))
        guard += 1
        if guard > 1000 * n + 1000:
            raise ConfigError("prompt space too small to fill the requested split")
    return out


def train_pairs(spec: TaskSpec, n: int, rng: np.random.Generator | None = None):
    rng = rng or np.random.default_rng(spec.train_seed)
    return _split_pairs(spec, n, rng, heldout=False)


def heldout_pairs(spec: TaskSpec, n: int, rng: np.random.Generator | None = None):
    rng = rng or np.random.default_rng(spec.heldout_seed)
    return _split_pairs(spec, n, rng, heldout=True)
