"""Forward (noising) process: linear-schedule masking, order-consistent
re-masking, and random-token corruption of masked positions.

All functions are pure: randomness comes from an explicit numpy Generator,
so identical (inputs, seed) give identical outputs anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DomainError


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear keep-probability schedule alpha(t) = 1 - t on t in [0, 1]."""

    kind: str = "linear"

    def __post_init__(self):
        if self.kind != "linear":
            raise ConfigError(f"unsupported schedule kind: {self.kind!r}")

    def alpha(self, t: float) -> float:
        if not 0.0 <= t <= 1.0:
            raise DomainError(f"t must lie in [0, 1], got {t}")
        return 1.0 - t


@dataclass(frozen=True)
class CorruptionConfig:
    """Random-token mixing applied to masked positions.

    p_rand is the probability a masked position is replaced by a uniform
    draw from the vocabulary excluding the mask token (replacing mask with
    mask would be a no-op and silently shrink the effective rate).
    vocab_size/mask_id identify that vocabulary.
    """

    p_rand: float
    vocab_size: int
    mask_id: int

    def __post_init__(self):
        if not 0.0 <= self.p_rand <= 1.0:
            raise ConfigError(f"p_rand must lie in [0, 1], got {self.p_rand}")
        if not 0 <= self.mask_id < self.vocab_size:
            raise ConfigError("mask_id must index into the vocabulary")
        if self.vocab_size < 2:
            raise ConfigError("need at least one non-mask token")


def mask_sequence(
    x_0, t: float, rng: np.random.Generator, mask_id: int
) -> np.ndarray:
    """Independently keep each token with probability 1 - t, else mask it."""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t must lie in [0, 1], got {t}")
    x = np.asarray(x_0, dtype=np.int64)
    if np.any(x == mask_id):
        raise ContractError("mask_sequence input must not contain mask tokens")
    keep = rng.random(x.shape) < (1.0 - t)
    return np.where(keep, x, mask_id)


def mask_by_order(x_0, order, keep_steps: int, mask_id: int) -> np.ndarray:
    """Reconstruct the state after `keep_steps` decoding steps.

    Position i is clean iff order[i] <= keep_steps. Order value 0 marks
    padding (never decoded); such positions hold mask_id in x_0 already and
    therefore stay masked under this rule.
    """
    if keep_steps < 0:
        raise DomainError("keep_steps must be non-negative")
    x = np.asarray(x_0, dtype=np.int64)
    pi = np.asarray(order, dtype=np.int64)
    if pi.shape != x.shape:
        raise ContractError("order must cover every generated position")
    return np.where(pi <= keep_steps, x, mask_id)


def corrupt_with_random(
    x_t, cfg: CorruptionConfig, rng: np.random.Generator
) -> np.ndarray:
    """Replace each masked position, independently with probability p_rand,
    by a uniform draw from the vocabulary excluding the mask token.
    Clean positions are never touched.
    """
    x = np.asarray(x_t, dtype=np.int64).copy()
    masked = x == cfg.mask_id
    # consume a fixed number of draws regardless of the mask pattern so the
    # rng stream does not depend on data content
    replace = rng.random(x.shape) < cfg.p_rand
    draws = rng.integers(0, cfg.vocab_size - 1, size=x.shape)
    draws = np.where(draws >= cfg.mask_id, draws + 1, draws)
    hit = masked & replace
    x[hit] = draws[hit]
    return x
