"""Reverse-process generation with exact trajectory recording.

Three schedules over the masked positions of the current block:

* full    — one token per step, highest-confidence position first
* static  — S steps per block, committing the k = B/S most confident
            still-masked positions each step
* dynamic — commit every position whose confidence clears a threshold,
            falling back to the single best position so each step always
            makes progress

Confidence is the maximum post-temperature softmax probability at a
position, with the mask token excluded from the distribution. Greedy
decoding (temperature 0) commits the argmax token but scores confidence on
the unit-temperature softmax, since the zero-temperature limit would give
every position confidence 1 and erase the ordering. Ties break toward the
lowest position index, so greedy runs are bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .denoiser import DenoiserParams, forward_logits_batch
from .diffusion import mask_by_order
from .errors import ConfigError, ContractError, DimensionError, DomainError

_MODES = ("full", "static", "dynamic")


@dataclass(frozen=True)
class DecodeConfig:
    block_size: int
    mode: str = "full"
    steps_per_block: int = 1
    threshold: float = 0.9
    temperature: float = 0.0
    max_new_tokens: int = 16
    stop_token: int | None = None

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ConfigError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.block_size < 1:
            raise ConfigError("block_size must be positive")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be positive")
        if self.temperature < 0:
            raise ConfigError("temperature must be non-negative")
        if self.mode == "static":
            s, b = self.steps_per_block, self.block_size
            if not (1 <= s <= b and b % s == 0):
                raise ConfigError(
                    f"static mode needs 1 <= steps_per_block <= block_size with "
                    f"block_size % steps_per_block == 0 (got B={b}, S={s})"
                )
        if self.mode == "dynamic" and not 0.0 < self.threshold <= 1.0:
            raise ConfigError("dynamic mode needs threshold in (0, 1]")

    def tokps(self) -> float:
        """Tokens committed per step: B/S for static, 1 for full."""
        if self.mode == "static":
            return self.block_size / self.steps_per_block
        if self.mode == "full":
            return 1.0
        raise ConfigError("tokps is undefined for dynamic mode")

    def to_json_dict(self) -> dict:
        return {
            "block_size": self.block_size,
            "mode": self.mode,
            "steps_per_block": self.steps_per_block,
            "threshold": self.threshold,
            "temperature": self.temperature,
            "max_new_tokens": self.max_new_tokens,
            "stop_token": self.stop_token,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "DecodeConfig":
        return cls(**d)


@dataclass
class Trajectory:
    """A recorded generation: prompt, output region, and decode order.

    `order[i]` is the 1-based step at which output position i was committed;
    0 marks padding after an early stop. `recorded_states` optionally holds
    the full sequence after each step (index s = state after s steps) for
    replay verification; it is never serialized.
    """

    prompt: list[int]
    output: list[int]
    order: list[int]
    steps_total: int
    config: DecodeConfig
    mask_id: int = 0
    recorded_states: list[list[int]] | None = field(default=None, repr=False)

    def per_step_positions(self) -> list[list[int]]:
        groups: list[list[int]] = [[] for _ in range(self.steps_total)]
        for pos, step in enumerate(self.order):
            if step > 0:
                groups[step - 1].append(pos)
        return groups

    def generated_positions(self) -> list[int]:
        return [p for p, s in enumerate(self.order) if s > 0]

    def full_sequence(self) -> np.ndarray:
        return np.concatenate(
            [np.asarray(self.prompt, np.int64), np.asarray(self.output, np.int64)]
        )

    def to_json_dict(self) -> dict:
        return {
            "prompt": list(map(int, self.prompt)),
            "output": list(map(int, self.output)),
            "order": list(map(int, self.order)),
            "steps_total": int(self.steps_total),
            "mask_id": int(self.mask_id),
            "config": self.config.to_json_dict(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Trajectory":
        return cls(
            prompt=list(d["prompt"]),
            output=list(d["output"]),
            order=list(d["order"]),
            steps_total=int(d["steps_total"]),
            config=DecodeConfig.from_json_dict(d["config"]),
            mask_id=int(d.get("mask_id", 0)),
        )


def position_probs(
    logit_rows: np.ndarray, temperature: float, mask_id: int
) -> np.ndarray:
    """Per-position commit distributions over the vocabulary minus the mask.

    Temperature 0 falls back to the unit-temperature softmax (the commit
    itself stays greedy; see module docstring).
    """
    t_eff = temperature if temperature > 0 else 1.0
    z = logit_rows / t_eff
    z[:, mask_id] = -np.inf
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p


def select_positions(
    conf: np.ndarray, mode: str, k: int, threshold: float
) -> np.ndarray:
    """Indices (into the masked-position list) to commit this step.

    Ties in confidence resolve toward the lowest index. Dynamic mode always
    commits at least the single most confident position.
    """
    n = conf.shape[0]
    if mode == "full":
        return np.array([int(np.argmax(conf))])
    if mode == "static":
        take = min(k, n)
        ranked = np.lexsort((np.arange(n), -conf))
        return np.sort(ranked[:take])
    if mode == "dynamic":
        chosen = np.nonzero(conf >= threshold)[0]
        if chosen.size == 0:
            chosen = np.array([int(np.argmax(conf))])
        return chosen
    raise ConfigError(f"unknown mode {mode!r}")


def _commit_tokens(
    probs: np.ndarray, temperature: float, rng: np.random.Generator | None
) -> np.ndarray:
    if temperature == 0:
        return probs.argmax(axis=1)
    if rng is None:
        raise ConfigError("sampling at temperature > 0 requires an rng")
    v = probs.shape[1]
    out = np.empty(probs.shape[0], dtype=np.int64)
    for i in range(probs.shape[0]):
        out[i] = rng.choice(v, p=probs[i])
    return out


def _check_lengths(params: DenoiserParams, prompt_len: int, cfg: DecodeConfig) -> None:
    b = cfg.block_size
    total = prompt_len + cfg.max_new_tokens
    if total > params.cfg.max_len:
        raise ConfigError(
            f"prompt ({prompt_len}) + max_new_tokens ({cfg.max_new_tokens}) "
            f"exceeds model max_len {params.cfg.max_len}"
        )
    if prompt_len % b != 0 or cfg.max_new_tokens % b != 0:
        raise DimensionError(
            "prompt length and max_new_tokens must both be multiples of block_size"
        )


def decode_batch(
    params: DenoiserParams,
    prompts,
    cfg: DecodeConfig,
    rng: np.random.Generator | None = None,
    record_states: bool = False,
) -> list[Trajectory]:
    """Decode a batch of equal-length prompts under one schedule.

    Items advance one step per engine iteration; an item finishes when its
    last block completes or a stop token is committed at a block boundary
    (later blocks then stay masked and are recorded as padding).
    """
    prompts = [list(map(int, p)) for p in prompts]
    if not prompts:
        return []
    p_len = len(prompts[0])
    if any(len(p) != p_len for p in prompts):
        raise ContractError("batched prompts must share one length")
    _check_lengths(params, p_len, cfg)

    mask_id = params.cfg.mask_id
    b = cfg.block_size
    g_len = cfg.max_new_tokens
    n = len(prompts)
    total = p_len + g_len
    k = b // cfg.steps_per_block if cfg.mode == "static" else 1

    x = np.full((n, total), mask_id, dtype=np.int64)
    x[:, :p_len] = np.asarray(prompts, dtype=np.int64)
    order = np.zeros((n, g_len), dtype=np.int64)
    steps = np.zeros(n, dtype=np.int64)
    cur_block = np.zeros(n, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    states: list[list[np.ndarray]] = [[x[i].copy()] for i in range(n)] if record_states else []

    while not done.all():
        active = np.nonzero(~done)[0]
        logits = forward_logits_batch(params, x[active]).data
        for row, i in enumerate(active):
            lo = p_len + int(cur_block[i]) * b
            hi = lo + b
            masked = lo + np.nonzero(x[i, lo:hi] == mask_id)[0]
            probs = position_probs(logits[row, masked], cfg.temperature, mask_id)
            conf = probs.max(axis=1)
            sel = select_positions(conf, cfg.mode, k, cfg.threshold)
            toks = _commit_tokens(probs[sel], cfg.temperature, rng)
            commit_at = masked[sel]
            x[i, commit_at] = toks
            steps[i] += 1
            order[i, commit_at - p_len] = steps[i]
            if record_states:
                states[i].append(x[i].copy())
            if not np.any(x[i, lo:hi] == mask_id):
                stopped = (
                    cfg.stop_token is not None
                    and np.any(x[i, lo:hi] == cfg.stop_token)
                )
                cur_block[i] += 1
                if stopped or hi >= total:
                    done[i] = True

    out = []
    for i in range(n):
        out.append(
            Trajectory(
                prompt=prompts[i],
                output=x[i, p_len:].tolist(),
                order=order[i].tolist(),
                steps_total=int(steps[i]),
                config=cfg,
                mask_id=mask_id,
                recorded_states=[s.tolist() for s in states[i]] if record_states else None,
            )
        )
    return out


def decode_full(
    params: DenoiserParams,
    prompt,
    cfg: DecodeConfig,
    rng: np.random.Generator | None = None,
    record_states: bool = False,
) -> Trajectory:
    """One token per step regardless of the configured steps_per_block."""
    return decode_batch(
        params, [prompt], replace(cfg, mode="full"), rng, record_states
    )[0]


def decode_static(
    params: DenoiserParams,
    prompt,
    cfg: DecodeConfig,
    rng: np.random.Generator | None = None,
    record_states: bool = False,
) -> Trajectory:
    if cfg.mode != "static":
        raise ConfigError("decode_static requires a static-mode config")
    return decode_batch(params, [prompt], cfg, rng, record_states)[0]


def decode_dynamic(
    params: DenoiserParams,
    prompt,
    cfg: DecodeConfig,
    rng: np.random.Generator | None = None,
    record_states: bool = False,
) -> Trajectory:
    if cfg.mode != "dynamic":
        raise ConfigError("decode_dynamic requires a dynamic-mode config")
    return decode_batch(params, [prompt], cfg, rng, record_states)[0]


def replay_states(traj: Trajectory, upto_step: int) -> np.ndarray:
    """Exact sequence state after `upto_step` decoding steps (prompt included)."""
    if not 0 <= upto_step <= traj.steps_total:
        raise DomainError(
            f"upto_step must lie in [0, {traj.steps_total}], got {upto_step}"
        )
    gen = mask_by_order(traj.output, traj.order, upto_step, traj.mask_id)
    return np.concatenate([np.asarray(traj.prompt, np.int64), gen])


def complete_batch(
    params: DenoiserParams,
    states,
    prompt_len: int,
    cfg: DecodeConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Fill every masked generation position of `states` under `cfg`.

    Used for reference-model rollouts from intermediate states: decoding
    resumes at each item's first block that still contains a mask and runs
    the configured schedule to the end of the sequence. Returns the
    completed [N, L] token array.
    """
    x = np.array(states, dtype=np.int64)
    if x.ndim != 2:
        raise DimensionError("complete_batch expects a [N, L] state array")
    _check_lengths(params, prompt_len, replace(cfg, max_new_tokens=x.shape[1] - prompt_len))
    mask_id = params.cfg.mask_id
    b = cfg.block_size
    k = b // cfg.steps_per_block if cfg.mode == "static" else 1
    total = x.shape[1]

    def first_masked_block(row: np.ndarray) -> int:
        masked = np.nonzero(row == mask_id)[0]
        return -1 if masked.size == 0 else int(masked[0]) // b

    pending = np.array([first_masked_block(r) for r in x])
    while np.any(pending >= 0):
        active = np.nonzero(pending >= 0)[0]
        logits = forward_logits_batch(params, x[active]).data
        for row, i in enumerate(active):
            lo = int(pending[i]) * b
            hi = min(lo + b, total)
            masked = lo + np.nonzero(x[i, lo:hi] == mask_id)[0]
            probs = position_probs(logits[row, masked], cfg.temperature, mask_id)
            conf = probs.max(axis=1)
            sel = select_positions(conf, cfg.mode, k, cfg.threshold)
            x[i, masked[sel]] = _commit_tokens(probs[sel], cfg.temperature, rng)
            if not np.any(x[i, lo:hi] == mask_id):
                pending[i] = first_masked_block(x[i])
    return x


# ---------------------------------------------------------------------------
# trajectory dataset file: JSON lines, one object per trajectory
# ---------------------------------------------------------------------------


def save_trajectories(path, trajectories) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for traj in trajectories:
            f.write(json.dumps(traj.to_json_dict()) + "\n")


def load_trajectories(path) -> list[Trajectory]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(Trajectory.from_json_dict(json.loads(line)))
    return out
