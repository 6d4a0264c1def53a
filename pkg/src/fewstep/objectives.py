"""Training losses.

* masked cross-entropy (the base diffusion objective)
* naive trajectory distillation — same formula, trajectory-sourced pairs
* marginal self-distillation — random masking of teacher samples
* discriminative step loss — sigmoid of the clamped student/reference
  log-likelihood ratio on real (teacher) vs fake (reference) continuations
* path-consistency loss — per-step trajectory cross-entropy weighted by
  (B - pi + 1) / B, pi the within-block step index
* the combined loss: discriminative + lambda * path

The log-ratio is summed over target positions (sequence level), scaled by
beta, then clamped to +-delta_clamp before the sigmoid so a saturated
sigmoid cannot silently zero the gradient. Reference parameters never
receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import numcore as nc
from .decoder import Trajectory, replay_states
from .denoiser import DenoiserParams, forward_logits_batch
from .diffusion import mask_sequence
from .errors import ContractError
from .numcore import Tensor


@dataclass
class LossConfig:
    """Knobs shared by the distillation losses.

    lambda_ weights the path-consistency term, beta scales the log-ratio,
    delta_clamp bounds it, block_size sets B for the path weights.
    """

    lambda_: float = 0.2
    beta: float = 1.0
    delta_clamp: float = 20.0
    block_size: int = 4

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ContractError("lambda_ must be non-negative")
        if self.beta <= 0 or self.delta_clamp <= 0:
            raise ContractError("beta and delta_clamp must be positive")


@dataclass
class DistillBatch:
    """Aligned (state, target, positions) items consumed by the losses.

    `masked_positions` lists each item's prediction targets: the positions
    that were masked when the state was built. When `corrupted` is set the
    states went through random-token mixing afterwards, so some of those
    positions now hold random tokens instead of the mask; they remain
    targets. `fake_targets`, when present, holds reference-model
    continuations of the same states for the discriminative loss.
    """

    states: list[list[int]]
    targets: list[list[int]]
    masked_positions: list[list[int]]
    mask_id: int
    order: list[list[int]] | None = None
    source: str = "teacher-trajectory"
    fake_targets: list[list[int]] | None = None
    corrupted: bool = False

    def __post_init__(self):
        n = len(self.states)
        if not (len(self.targets) == len(self.masked_positions) == n):
            raise ContractError("batch fields must have equal lengths")
        if self.source not in ("teacher-trajectory", "reference-rollout"):
            raise ContractError(f"unknown batch source {self.source!r}")
        for state, target, pos in zip(self.states, self.targets, self.masked_positions):
            if len(state) != len(target):
                raise ContractError("state and target lengths differ")
            pos = np.asarray(pos, dtype=np.int64)
            if pos.size == 0:
                continue
            if pos.min() < 0 or pos.max() >= len(state):
                raise ContractError("target position out of range")
            if np.any(np.asarray(target)[pos] == self.mask_id):
                raise ContractError("targets must be mask-free at target positions")
            if not self.corrupted and np.any(np.asarray(state)[pos] != self.mask_id):
                raise ContractError("target positions must be masked in the state")

    def __len__(self) -> int:
        return len(self.states)


class MaskedLoss(NamedTuple):
    value: Tensor
    skipped: bool


def _gather_entries(positions_list, targets, valid):
    rows, cols, toks, segs, weights = [], [], [], [], []
    for seg, item in enumerate(valid):
        pos = np.asarray(positions_list[item], dtype=np.int64)
        tgt = np.asarray(targets[item], dtype=np.int64)
        rows.append(np.full(pos.size, item, dtype=np.int64))
        cols.append(pos)
        toks.append(tgt[pos])
        segs.append(np.full(pos.size, seg, dtype=np.int64))
        weights.append(np.full(pos.size, 1.0 / pos.size))
    cat = lambda parts: np.concatenate(parts) if parts else np.zeros(0, np.int64)
    return cat(rows), cat(cols), cat(toks), cat(segs), cat(weights)


def _batch_masked_ce(
    params: DenoiserParams, states, targets, positions_list
) -> MaskedLoss:
    """Mean over non-empty items of the per-item mean token cross-entropy."""
    valid = [i for i, pos in enumerate(positions_list) if len(pos) > 0]
    if not valid:
        return MaskedLoss(nc.constant(0.0), True)
    ids = np.asarray(states, dtype=np.int64)
    lsm = nc.log_softmax(forward_logits_batch(params, ids))
    rows, cols, toks, segs, weights = _gather_entries(positions_list, targets, valid)
    per_item = nc.segment_sum(lsm, (rows, cols, toks), segs, len(valid), weights)
    return MaskedLoss(nc.scale(nc.sum_all(per_item), -1.0 / len(valid)), False)


def mdm_loss(params: DenoiserParams, x_0, x_t, positions) -> MaskedLoss:
    """Mean over masked positions of -log p(x_0[i] | x_t)."""
    pos = sorted(int(p) for p in positions)
    if pos:
        xt = np.asarray(x_t, dtype=np.int64)
        if np.any(xt[pos] != params.cfg.mask_id):
            raise ContractError("mdm_loss positions must be masked in x_t")
    return _batch_masked_ce(params, [list(x_t)], [list(x_0)], [pos])


def naive_td_loss(params: DenoiserParams, batch: DistillBatch) -> MaskedLoss:
    """Identical formula to mdm_loss; only the data pairing differs."""
    if batch.source != "teacher-trajectory":
        raise ContractError("naive_td_loss expects teacher-trajectory batches")
    return _batch_masked_ce(
        params, batch.states, batch.targets, batch.masked_positions
    )


def marginal_self_distill_loss(
    params: DenoiserParams,
    x_0,
    t: float,
    rng: np.random.Generator,
    gen_start: int = 0,
) -> MaskedLoss:
    """Mask a teacher sample at level t and apply the base loss.

    Only positions at or after `gen_start` are maskable; the prompt region
    stays clean.
    """
    x0 = np.asarray(x_0, dtype=np.int64)
    region = mask_sequence(x0[gen_start:], t, rng, params.cfg.mask_id)
    x_t = np.concatenate([x0[:gen_start], region])
    positions = (gen_start + np.nonzero(region == params.cfg.mask_id)[0]).tolist()
    return mdm_loss(params, x0, x_t, positions)


# ---------------------------------------------------------------------------
# discriminative (log-ratio) loss
# ---------------------------------------------------------------------------


def _target_logprob_sums(lsm_data: np.ndarray, positions_list, targets) -> np.ndarray:
    out = np.zeros(len(targets))
    for i, (pos, tgt) in enumerate(zip(positions_list, targets)):
        pos = np.asarray(pos, dtype=np.int64)
        out[i] = lsm_data[i, pos, np.asarray(tgt, np.int64)[pos]].sum()
    return out


def _validate_pairing(states, reals, fakes, positions_list, mask_id: int) -> None:
    for state, real, fake, pos in zip(states, reals, fakes, positions_list):
        if not len(state) == len(real) == len(fake):
            raise ContractError("real/fake continuations must match the state length")
        pos = np.asarray(pos, dtype=np.int64)
        if pos.size == 0:
            raise ContractError("discriminative loss needs at least one target position")
        if np.any(np.asarray(real)[pos] == mask_id) or np.any(
            np.asarray(fake)[pos] == mask_id
        ):
            raise ContractError(
                "real and fake terms must both be decoded at every target position"
            )


def ddo_batch_loss(
    params_theta: DenoiserParams,
    params_ref: DenoiserParams,
    states,
    real_targets,
    fake_targets,
    positions_list,
    cfg: LossConfig,
) -> Tensor:
    """Batch mean of the per-state discriminative loss.

    One student forward per batch serves both the real and the fake term
    (same conditioning state); the reference pass runs without a gradient.
    """
    _validate_pairing(
        states, real_targets, fake_targets, positions_list, params_theta.cfg.mask_id
    )
    ids = np.asarray(states, dtype=np.int64)
    n = ids.shape[0]

    ref_lsm = nc.log_softmax(forward_logits_batch(params_ref, ids)).data
    ref_real = _target_logprob_sums(ref_lsm, positions_list, real_targets)
    ref_fake = _target_logprob_sums(ref_lsm, positions_list, fake_targets)

    lsm = nc.log_softmax(forward_logits_batch(params_theta, ids))
    rows = np.concatenate(
        [np.full(len(p), i, np.int64) for i, p in enumerate(positions_list)]
    )
    cols = np.concatenate([np.asarray(p, np.int64) for p in positions_list])
    segs = rows
    real_toks = np.concatenate(
        [np.asarray(t, np.int64)[np.asarray(p, np.int64)]
         for p, t in zip(positions_list, real_targets)]
    )
    fake_toks = np.concatenate(
        [np.asarray(t, np.int64)[np.asarray(p, np.int64)]
         for p, t in zip(positions_list, fake_targets)]
    )
    lp_real = nc.segment_sum(lsm, (rows, cols, real_toks), segs, n)
    lp_fake = nc.segment_sum(lsm, (rows, cols, fake_toks), segs, n)

    c = cfg.delta_clamp
    delta_real = nc.clamp(nc.scale(nc.sub(lp_real, nc.constant(ref_real)), cfg.beta), -c, c)
    delta_fake = nc.clamp(nc.scale(nc.sub(lp_fake, nc.constant(ref_fake)), cfg.beta), -c, c)
    # -log sigma(dr) - log(1 - sigma(df)) == softplus(-dr) + softplus(df)
    total = nc.add(
        nc.sum_all(nc.softplus(nc.neg(delta_real))),
        nc.sum_all(nc.softplus(delta_fake)),
    )
    return nc.scale(total, 1.0 / n)


def ddo_step_loss(
    params_theta: DenoiserParams,
    params_ref: DenoiserParams,
    x_t,
    x0_real,
    x0_fake,
    positions,
    cfg: LossConfig,
) -> Tensor:
    """Single-state discriminative loss; see ddo_batch_loss."""
    pos = sorted(int(p) for p in positions)
    return ddo_batch_loss(
        params_theta, params_ref, [list(x_t)], [list(x0_real)], [list(x0_fake)],
        [pos], cfg,
    )


# ---------------------------------------------------------------------------
# path-consistency loss
# ---------------------------------------------------------------------------


def path_weight(step_in_block: int, block_size: int) -> float:
    """Weight (B - pi + 1) / B for a token decoded at within-block step pi."""
    if not 1 <= step_in_block <= block_size:
        raise ContractError(
            f"within-block step {step_in_block} outside 1..{block_size}"
        )
    return (block_size - step_in_block + 1) / block_size


def _within_block_ranks(traj: Trajectory, block_size: int) -> dict[int, int]:
    """Map each global step to its 1-based within-block step index.

    Steps inside a block are contiguous for a well-formed trajectory, so
    the index is the offset from the block's first step; an index past
    block_size means the recorded order violates that structure.
    """
    ranks: dict[int, int] = {}
    order = np.asarray(traj.order, dtype=np.int64)
    blocks = np.arange(order.size) // block_size
    for b in np.unique(blocks):
        steps = np.unique(order[(blocks == b) & (order > 0)])
        if steps.size == 0:
            continue
        first = int(steps.min())
        for s in steps.tolist():
            r = int(s) - first + 1
            if r > block_size:
                raise ContractError(
                    f"within-block step index {r} exceeds block size {block_size}"
                )
            ranks[int(s)] = r
    return ranks


def path_loss(
    params: DenoiserParams,
    traj: Trajectory,
    block_size: int,
    step_weights: Callable[[int, int], float] | None = None,
) -> MaskedLoss:
    """Weighted trajectory cross-entropy over the recorded per-step states."""
    return path_batch_loss(params, [traj], block_size, step_weights)


def path_batch_loss(
    params: DenoiserParams,
    trajs: list[Trajectory],
    block_size: int,
    step_weights: Callable[[int, int], float] | None = None,
) -> MaskedLoss:
    """Mean over trajectories of the per-trajectory path loss.

    For every decoding step the state just before that step is rebuilt via
    replay, and each token committed at the step contributes
    -w * log p(token | state), w from `step_weights` (default the
    early-step-emphasizing ramp). Each trajectory normalizes by its decoded
    token count.
    """
    wfn = step_weights or path_weight
    states, rows, cols, toks, weights = [], [], [], [], []
    n_rows = 0
    n_trajs = 0
    for traj in trajs:
        decoded = traj.generated_positions()
        if not decoded:
            continue
        n_trajs += 1
        ranks = _within_block_ranks(traj, block_size)
        p_len = len(traj.prompt)
        x0 = np.asarray(traj.output, dtype=np.int64)
        order = np.asarray(traj.order, dtype=np.int64)
        count = len(decoded)
        for s in sorted(ranks):
            states.append(replay_states(traj, s - 1))
            at_step = np.nonzero(order == s)[0]
            w = wfn(ranks[s], block_size)
            rows.append(np.full(at_step.size, n_rows, np.int64))
            cols.append(p_len + at_step)
            toks.append(x0[at_step])
            weights.append(np.full(at_step.size, w / count))
            n_rows += 1
    if n_rows == 0:
        return MaskedLoss(nc.constant(0.0), True)
    lsm = nc.log_softmax(forward_logits_batch(params, np.stack(states)))
    total = nc.gather_sum(
        lsm,
        (np.concatenate(rows), np.concatenate(cols), np.concatenate(toks)),
        np.concatenate(weights),
    )
    return MaskedLoss(nc.scale(total, -1.0 / n_trajs), False)


# ---------------------------------------------------------------------------
# combined loss
# ---------------------------------------------------------------------------


def t3d_loss(
    params_theta: DenoiserParams,
    params_ref: DenoiserParams,
    batch: DistillBatch,
    trajs: list[Trajectory],
    cfg: LossConfig,
) -> tuple[Tensor, dict[str, float]]:
    """Discriminative term plus lambda_ times the path term.

    Returns the total and a float breakdown for logging. With lambda_ == 0
    the path term is skipped entirely and the total equals the
    discriminative component exactly.
    """
    if batch.fake_targets is None:
        raise ContractError("combined loss needs fake_targets on the batch")
    ddo = ddo_batch_loss(
        params_theta,
        params_ref,
        batch.states,
        batch.targets,
        batch.fake_targets,
        batch.masked_positions,
        cfg,
    )
    if cfg.lambda_ == 0.0:
        parts = {"ddo": ddo.item(), "path": 0.0, "total": ddo.item()}
        return ddo, parts
    path = path_batch_loss(params_theta, trajs, cfg.block_size)
    total = nc.add(ddo, nc.scale(path.value, cfg.lambda_))
    parts = {"ddo": ddo.item(), "path": path.value.item(), "total": total.item()}
    return total, parts
