"""Training pipelines: teacher pretraining, trajectory collection, and
distillation with periodic reference snapshots.

Optimization is Adam with decoupled weight decay. All randomness flows
through numpy SeedSequence children split by purpose (batching, masking,
corruption, fake rollouts, path sampling), so a (dataset, config, seed)
triple pins the final checkpoint bit for bit and disabling one loss
component never shifts another component's stream.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import objectives, tasks
from .decoder import (
    DecodeConfig,
    Trajectory,
    complete_batch,
    decode_batch,
    load_trajectories,
    replay_states,
    save_trajectories,
)
from .denoiser import DenoiserParams, ModelConfig, init_params
from .diffusion import CorruptionConfig, corrupt_with_random, mask_sequence
from .errors import ConfigError, ContractError, DivergenceError
from .numcore import Tape, backward
from .objectives import DistillBatch, LossConfig

LOG_HEADER = ["step", "loss_total", "loss_ddo", "loss_path", "grad_norm", "ref_round"]
_LOSSES = ("mdm", "naive_td", "marginal_sd", "t3d")


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    total_steps: int = 1000
    batch_size: int = 32
    ref_update_interval: int = 10
    p_rand: float = 0.1
    loss: str = "mdm"
    loss_config: LossConfig = field(default_factory=LossConfig)
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.ref_update_interval < 1:
            raise ConfigError("ref_update_interval must be >= 1")
        if self.loss not in _LOSSES:
            raise ConfigError(f"loss must be one of {_LOSSES}, got {self.loss!r}")
        if not 0.0 <= self.p_rand <= 1.0:
            raise ConfigError("p_rand must lie in [0, 1]")


@dataclass
class RolloutSpec:
    """How teacher trajectories are collected (one token per step by default)."""

    task: tasks.TaskSpec
    decode: DecodeConfig
    n_prompts: int
    seed: int = 0


class Adam:
    """Adam with decoupled weight decay over a DenoiserParams mapping."""

    def __init__(self, params: DenoiserParams, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, params: DenoiserParams) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.adam_beta1**self.t
        bc2 = 1.0 - c.adam_beta2**self.t
        for name, p in params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= c.adam_beta1
            m += (1.0 - c.adam_beta1) * g
            v *= c.adam_beta2
            v += (1.0 - c.adam_beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            if c.weight_decay:
                update = update + c.weight_decay * p.data
            p.data -= c.learning_rate * update


def grad_norm(params: DenoiserParams) -> float:
    return float(np.sqrt(sum((t.grad**2).sum() for t in params.tensors.values())))


def snapshot_reference(params: DenoiserParams) -> DenoiserParams:
    """Deep stop-gradient copy: later updates to the source never leak in,
    and the snapshot carries no grad buffers at all."""
    return params.copy(requires_grad=False)


class _CsvLogger:
    def __init__(self, path):
        self.path = path
        self._rows: list[list] = []

    def log(self, step, total, ddo, path_v, gnorm, ref_round) -> None:
        self._rows.append([step, total, ddo, path_v, gnorm, ref_round])

    def flush(self) -> None:
        if self.path is None:
            return
        with open(self.path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(LOG_HEADER)
            w.writerows([s, repr(a), repr(b), repr(c), repr(d), r]
                        for s, a, b, c, d, r in self._rows)


def _check_finite_loss(value: float, step: int) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"loss became non-finite at step {step}")


def _quick_exact_match(
    params: DenoiserParams, task: tasks.TaskSpec, decode_cfg: DecodeConfig, n: int
) -> float:
    pairs = tasks.heldout_pairs(task, n)
    prompts = [p for p, _ in pairs]
    trajs = decode_batch(params, prompts, decode_cfg)
    hits = sum(
        1
        for traj, (_, ans) in zip(trajs, pairs)
        if traj.output[: len(ans)] == list(ans)
    )
    return hits / len(pairs)


def train_teacher(
    task: tasks.TaskSpec,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    log_path=None,
    eval_every: int = 0,
    eval_n: int = 128,
    stop_accuracy: float | None = None,
) -> DenoiserParams:
    """Pretrain a denoiser on randomly masked task data.

    Each step samples fresh (prompt, answer) pairs from the task's training
    split, masks the answer region at a per-item uniform noise level, and
    takes one Adam step on the masked cross-entropy. When `stop_accuracy`
    is set, training stops at the first periodic evaluation (every
    `eval_every` steps, greedy full decoding) that reaches it.
    """
    params = init_params(model_cfg, train_cfg.seed)
    opt = Adam(params, train_cfg)
    data_rng, mask_rng = _spawn_rngs(train_cfg.seed, 2)
    logger = _CsvLogger(log_path)
    eval_cfg = DecodeConfig(
        block_size=model_cfg.block_size,
        mode="full",
        max_new_tokens=task.answer_len,
    )

    for step in range(train_cfg.total_steps):
        pairs = tasks.train_pairs(task, train_cfg.batch_size, rng=data_rng)
        states, targets, positions = [], [], []
        for prompt, answer in pairs:
            x0 = np.concatenate([prompt, answer]).astype(np.int64)
            t = mask_rng.uniform()
            masked = mask_sequence(x0[task.prompt_len :], t, mask_rng, model_cfg.mask_id)
            x_t = np.concatenate([x0[: task.prompt_len], masked])
            pos = (task.prompt_len + np.nonzero(masked == model_cfg.mask_id)[0]).tolist()
            states.append(x_t.tolist())
            targets.append(x0.tolist())
            positions.append(pos)

        params.zero_grads()
        try:
            with Tape() as tape:
                loss = objectives._batch_masked_ce(params, states, targets, positions)
                backward(tape, loss.value)
        except FloatingPointError as exc:
            raise DivergenceError(f"teacher training diverged at step {step}: {exc}") from exc
        value = loss.value.item()
        _check_finite_loss(value, step)
        gnorm = grad_norm(params)
        opt.step(params)
        logger.log(step, value, 0.0, 0.0, gnorm, 0)

        if (
            stop_accuracy is not None
            and eval_every
            and (step + 1) % eval_every == 0
            and _quick_exact_match(params, task, eval_cfg, eval_n) >= stop_accuracy
        ):
            break

    logger.flush()
    return params


def collect_trajectories(
    teacher_params: DenoiserParams, spec: RolloutSpec, out_path
) -> dict:
    """Roll the teacher over training prompts and write verified trajectories.

    Every record is replay-checked against the states the decoder actually
    held; a mismatching record is dropped and counted rather than written.
    """
    rng = np.random.default_rng(spec.seed)
    pairs = tasks.train_pairs(spec.task, spec.n_prompts)
    prompts = [p for p, _ in pairs]
    kept: list[Trajectory] = []
    dropped = 0
    for lo in range(0, len(prompts), 64):
        chunk = prompts[lo : lo + 64]
        for traj in decode_batch(
            teacher_params, chunk, spec.decode, rng, record_states=True
        ):
            ok = all(
                np.array_equal(replay_states(traj, s), np.asarray(traj.recorded_states[s]))
                for s in range(traj.steps_total + 1)
            )
            if ok:
                traj.recorded_states = None
                kept.append(traj)
            else:
                dropped += 1
    save_trajectories(out_path, kept)
    return {"written": len(kept), "dropped": dropped}


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------


def _spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _block_boundary_steps(traj: Trajectory, block_size: int) -> list[int]:
    """Steps after which a whole number of blocks is complete and masked
    positions remain: the states a block-wise few-step decoder can visit."""
    order = np.asarray(traj.order, dtype=np.int64)
    boundaries = [0]
    n_blocks = order.size // block_size
    for b in range(n_blocks - 1):
        chunk = order[b * block_size : (b + 1) * block_size]
        chunk = chunk[chunk > 0]
        if chunk.size == 0:
            break
        boundaries.append(int(chunk.max()))
    return boundaries


def _sample_real_pairs(
    trajs: list[Trajectory],
    idxs,
    block_size: int,
    p_rand: float,
    corrupt_cfg: CorruptionConfig,
    batch_rng: np.random.Generator,
    corrupt_rng: np.random.Generator,
):
    """Build (state, target, positions) triples from block-boundary states.

    Returns the corrupted states used as model input plus the clean states
    the reference completes from.
    """
    states, clean_states, targets, positions = [], [], [], []
    for i in idxs:
        traj = trajs[i]
        boundaries = _block_boundary_steps(traj, block_size)
        s = int(batch_rng.choice(boundaries))
        x_t = replay_states(traj, s)
        pos = np.nonzero(x_t == traj.mask_id)[0]
        pos = pos[np.asarray(traj.order)[pos - len(traj.prompt)] > 0]
        clean_states.append(x_t.tolist())
        corrupted = (
            corrupt_with_random(x_t, corrupt_cfg, corrupt_rng) if p_rand > 0 else x_t
        )
        states.append(corrupted.tolist())
        targets.append(traj.full_sequence().tolist())
        positions.append(pos.tolist())
    return states, clean_states, targets, positions


def distill(
    dataset,
    student_init: DenoiserParams,
    train_cfg: TrainConfig,
    target_decode: DecodeConfig | None = None,
    log_path=None,
    on_step: Callable | None = None,
) -> DenoiserParams:
    """Distill a student from a teacher trajectory dataset.

    `dataset` is a list of trajectories or a path to the JSON-lines file.
    The student starts as a bitwise copy of `student_init`. For the
    combined loss, the reference model re-snapshots every
    `ref_update_interval` steps and supplies fresh fake completions of each
    batch state under `target_decode` (default: one step per block of
    `loss_config.block_size`, the schedule the student targets).
    """
    trajs = load_trajectories(dataset) if isinstance(dataset, (str, bytes)) or hasattr(dataset, "__fspath__") else list(dataset)
    if not trajs:
        raise ContractError("empty trajectory dataset")
    model_cfg = student_init.cfg
    for traj in trajs:
        if max(traj.output) >= model_cfg.vocab_size or traj.mask_id != model_cfg.mask_id:
            raise ConfigError("dataset vocabulary does not match the model")

    params = student_init.copy(requires_grad=True)
    opt = Adam(params, train_cfg)
    lc = train_cfg.loss_config
    if target_decode is None:
        target_decode = DecodeConfig(
            block_size=lc.block_size,
            mode="static",
            steps_per_block=1,
            max_new_tokens=len(trajs[0].output),
        )
    corrupt_cfg = CorruptionConfig(
        p_rand=train_cfg.p_rand,
        vocab_size=model_cfg.vocab_size,
        mask_id=model_cfg.mask_id,
    )
    batch_rng, corrupt_rng, fake_rng, path_rng, mask_rng = _spawn_rngs(train_cfg.seed, 5)
    logger = _CsvLogger(log_path)
    ref: DenoiserParams | None = None
    ref_round = -1
    prompt_len = len(trajs[0].prompt)

    for step in range(train_cfg.total_steps):
        if train_cfg.loss == "t3d" and step % train_cfg.ref_update_interval == 0:
            ref = snapshot_reference(params)
            ref_round = step // train_cfg.ref_update_interval

        idxs = batch_rng.integers(0, len(trajs), size=train_cfg.batch_size)
        parts = {"ddo": 0.0, "path": 0.0}
        params.zero_grads()

        try:
            value = _distill_step(
                params, ref, trajs, idxs, train_cfg, model_cfg, prompt_len,
                target_decode, corrupt_cfg, parts,
                batch_rng, corrupt_rng, fake_rng, path_rng, mask_rng,
            )
        except FloatingPointError as exc:
            raise DivergenceError(f"distillation diverged at step {step}: {exc}") from exc
        _check_finite_loss(value, step)
        gnorm = grad_norm(params)
        opt.step(params)
        logger.log(step, value, parts["ddo"], parts["path"], gnorm, max(ref_round, 0))
        if on_step is not None:
            on_step(step, params, ref)

    logger.flush()
    return params


def _distill_step(
    params, ref, trajs, idxs, train_cfg, model_cfg, prompt_len, target_decode,
    corrupt_cfg, parts, batch_rng, corrupt_rng, fake_rng, path_rng, mask_rng,
) -> float:
    lc = train_cfg.loss_config
    if True:
        if train_cfg.loss in ("mdm", "marginal_sd"):
            states, targets, positions = [], [], []
            for i in idxs:
                x0 = trajs[i].full_sequence()
                t = mask_rng.uniform()
                masked = mask_sequence(x0[prompt_len:], t, mask_rng, model_cfg.mask_id)
                x_t = np.concatenate([x0[:prompt_len], masked])
                pos = (prompt_len + np.nonzero(masked == model_cfg.mask_id)[0]).tolist()
                states.append(x_t.tolist())
                targets.append(x0.tolist())
                positions.append(pos)
            with Tape() as tape:
                out = objectives._batch_masked_ce(params, states, targets, positions)
                backward(tape, out.value)
            value = out.value.item()

        elif train_cfg.loss == "naive_td":
            states, _, targets, positions = _sample_real_pairs(
                trajs, idxs, lc.block_size, train_cfg.p_rand,
                corrupt_cfg, batch_rng, corrupt_rng,
            )
            batch = DistillBatch(
                states=states, targets=targets, masked_positions=positions,
                mask_id=model_cfg.mask_id, corrupted=train_cfg.p_rand > 0,
            )
            with Tape() as tape:
                out = objectives.naive_td_loss(params, batch)
                backward(tape, out.value)
            value = out.value.item()

        else:  # t3d
            states, clean_states, targets, positions = _sample_real_pairs(
                trajs, idxs, lc.block_size, train_cfg.p_rand,
                corrupt_cfg, batch_rng, corrupt_rng,
            )
            fakes = complete_batch(
                ref, np.asarray(clean_states), prompt_len, target_decode, fake_rng
            )
            path_idx = path_rng.integers(0, len(trajs), size=min(2, len(trajs)))
            path_trajs = [trajs[i] for i in path_idx]
            batch = DistillBatch(
                states=states, targets=targets, masked_positions=positions,
                mask_id=model_cfg.mask_id, fake_targets=fakes.tolist(),
                corrupted=train_cfg.p_rand > 0,
            )
            with Tape() as tape:
                total, parts = objectives.t3d_loss(params, ref, batch, path_trajs, lc)
                backward(tape, total)
            value = total.item()

        _check_finite_loss(value, step)
        gnorm = grad_norm(params)
        opt.step(params)
        logger.log(step, value, parts["ddo"], parts["path"], gnorm, max(ref_round, 0))
        if on_step is not None:
            on_step(step, params, ref)

    logger.flush()
    return params
