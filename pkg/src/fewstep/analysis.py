"""Exact-enumeration oracles for the theory checks.

Provides exact posteriors over small completion spaces, conditional total
correlation (expected KL between a conditional joint and the product of its
per-position marginals), the chain-rule KL decomposition, and a report
comparing the total correlation of a teacher's decoding distribution
against a student's few-step composition.

Everything here is pure numpy on probability tables; nothing is
differentiated. Zero-probability support cells follow the convention
0 * log(0/q) = 0, while p > 0 against q = 0 is an absolute-continuity
violation and raises.
"""

from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .decoder import DecodeConfig, decode_batch, position_probs, select_positions
from .denoiser import DenoiserParams, forward_logits
from .errors import CapacityError, ConfigError, ContractError, DomainError

_MASS_TOL = 1e-10
ENUMERATION_GUARD = 10**6


@dataclass
class ExactDistribution:
    """Finite distribution over distinct hashable outcomes."""

    support: list
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if len(self.support) != self.probs.size:
            raise ContractError("support and probs must align")
        if len(set(self.support)) != len(self.support):
            raise ContractError("support entries must be distinct")
        if self.probs.size and self.probs.min() < 0:
            raise ContractError("probabilities must be non-negative")
        if abs(self.probs.sum() - 1.0) > _MASS_TOL:
            raise ContractError(f"probabilities sum to {self.probs.sum()}, not 1")

    def as_dict(self) -> dict:
        return dict(zip(self.support, self.probs))


def kl_divergence(p: dict, q: dict) -> float:
    """KL(p || q) over dict-keyed distributions; raises on support violation."""
    total = 0.0
    for x, px in p.items():
        if px == 0.0:
            continue
        qx = q.get(x, 0.0)
        if qx == 0.0:
            raise DomainError(f"absolute continuity violated at {x!r}")
        total += px * np.log(px / qx)
    return float(total)


def enumerate_posterior(
    params: DenoiserParams, x_t, positions
) -> ExactDistribution:
    """Exact model posterior over completions of `positions` given x_t.

    The predictor factorizes over positions, so each completion tuple's
    probability is the product of per-position categorical probabilities
    from a single forward pass.
    """
    pos = sorted(int(p) for p in positions)
    v = params.cfg.vocab_size
    if v ** len(pos) > ENUMERATION_GUARD:
        raise CapacityError(
            f"{v}^{len(pos)} completions exceed the enumeration guard"
        )
    if not pos:
        return ExactDistribution([()], np.array([1.0]))
    xt = np.asarray(x_t, dtype=np.int64)
    if np.any(xt[pos] != params.cfg.mask_id):
        raise ContractError("all positions must be masked in x_t")
    logits = forward_logits(params, xt).data[pos]
    z = logits - logits.max(axis=1, keepdims=True)
    rows = np.exp(z)
    rows /= rows.sum(axis=1, keepdims=True)
    prob = rows[0]
    for r in rows[1:]:
        prob = np.multiply.outer(prob, r)
    support = list(itertools.product(range(v), repeat=len(pos)))
    return ExactDistribution(support, prob.reshape(-1))


def _split_pair_joint(joint: ExactDistribution):
    """Group a joint over (x, y) pairs into y-marginal and conditionals."""
    marginal: dict = defaultdict(float)
    conditional: dict = defaultdict(dict)
    for (x, y), p in zip(joint.support, joint.probs):
        marginal[y] += p
        if p > 0.0:
            conditional[y][x] = conditional[y].get(x, 0.0) + p
    for y, table in conditional.items():
        z = marginal[y]
        conditional[y] = {x: p / z for x, p in table.items()}
    return dict(marginal), dict(conditional)


def conditional_tc(joint: ExactDistribution) -> float:
    """Expected KL between p(x_s | x_t) and the product of its per-position
    marginals, over a joint whose support entries are (x_s, x_t) tuple pairs.

    Conditioning states with zero probability are skipped.
    """
    marginal, conditional = _split_pair_joint(joint)
    total = 0.0
    for y, py in marginal.items():
        if py == 0.0:
            continue
        total += py * _tc_of_conditional(conditional[y])
    return float(total)


def _tc_of_conditional(cond: dict) -> float:
    n = len(next(iter(cond)))
    if n == 0:
        return 0.0
    marginals = [defaultdict(float) for _ in range(n)]
    for x, p in cond.items():
        for i, xi in enumerate(x):
            marginals[i][xi] += p
    factorized = {}
    for x in cond:
        q = 1.0
        for i, xi in enumerate(x):
            q *= marginals[i][xi]
        factorized[x] = q
    return kl_divergence(cond, factorized)


def kl_decomposition_check(
    p_joint: ExactDistribution, q_joint: ExactDistribution
) -> tuple[float, float, float]:
    """Both sides of KL(P(x,y)||Q(x,y)) = KL(P(y)||Q(y)) + E_y KL(P(x|y)||Q(x|y)).

    Returns (lhs, rhs, |lhs - rhs|); the decomposition is an identity so the
    residual should sit at float rounding.
    """
    lhs = kl_divergence(p_joint.as_dict(), q_joint.as_dict())
    p_marg, p_cond = _split_pair_joint(p_joint)
    q_marg, q_cond = _split_pair_joint(q_joint)
    rhs = kl_divergence(p_marg, q_marg)
    for y, py in p_marg.items():
        if py == 0.0:
            continue
        if y not in q_cond:
            raise DomainError(f"absolute continuity violated at y={y!r}")
        rhs += py * kl_divergence(p_cond[y], q_cond[y])
    return lhs, rhs, abs(lhs - rhs)


# ---------------------------------------------------------------------------
# decode-tree enumeration and the total-correlation trend report
# ---------------------------------------------------------------------------


def enumerate_decode_paths(
    params: DenoiserParams,
    prompt,
    decode_cfg: DecodeConfig,
    cap: int = ENUMERATION_GUARD,
) -> list[tuple[list[tuple], tuple, float]]:
    """All decode runs from the fully masked state, with exact probabilities.

    Each entry is (states, final_sequence, probability) where states[s] is
    the full sequence (as a tuple) after s steps. Only full/static
    schedules are supported: every path then has the same depth, which the
    total-correlation aggregation relies on.
    """
    if decode_cfg.mode == "dynamic":
        raise ConfigError("decode-tree enumeration supports full/static schedules")
    mask_id = params.cfg.mask_id
    v = params.cfg.vocab_size
    prompt = list(map(int, prompt))
    p_len = len(prompt)
    g_len = decode_cfg.max_new_tokens
    if (v - 1) ** g_len > cap:
        raise CapacityError(
            f"decode tree of ({v - 1})^{g_len} leaves exceeds the guard"
        )
    b = decode_cfg.block_size
    k = b // decode_cfg.steps_per_block if decode_cfg.mode == "static" else 1
    root = np.concatenate(
        [np.asarray(prompt, np.int64), np.full(g_len, mask_id, np.int64)]
    )

    out: list[tuple[list[tuple], tuple, float]] = []

    def walk(x: np.ndarray, prob: float, states: list[tuple]):
        masked_all = np.nonzero(x[p_len:] == mask_id)[0]
        if masked_all.size == 0:
            out.append((states, tuple(x.tolist()), prob))
            return
        block = int(masked_all[0] + p_len) // b
        lo, hi = block * b, block * b + b
        masked = lo + np.nonzero(x[lo:hi] == mask_id)[0]
        logits = forward_logits(params, x).data
        probs = position_probs(
            logits[masked].copy(), decode_cfg.temperature, mask_id
        )
        conf = probs.max(axis=1)
        sel = select_positions(conf, decode_cfg.mode, k, decode_cfg.threshold)
        commit_at = masked[sel]
        if decode_cfg.temperature == 0:
            child = x.copy()
            child[commit_at] = probs[sel].argmax(axis=1)
            walk(child, prob, states + [tuple(child.tolist())])
            return
        choices = [np.nonzero(probs[s] > 0)[0] for s in sel]
        for combo in itertools.product(*choices):
            p_branch = 1.0
            for s, tok in zip(sel, combo):
                p_branch *= probs[s, tok]
            if p_branch == 0.0:
                continue
            child = x.copy()
            child[commit_at] = np.asarray(combo, np.int64)
            walk(child, prob * p_branch, states + [tuple(child.tolist())])

    walk(root, 1.0, [tuple(root.tolist())])
    return out


def sample_decode_paths(
    params: DenoiserParams,
    prompt,
    decode_cfg: DecodeConfig,
    n_rollouts: int,
    rng: np.random.Generator,
) -> list[tuple[list[tuple], tuple, float]]:
    """Monte Carlo counterpart of enumerate_decode_paths (weight 1/n each)."""
    trajs = decode_batch(
        params, [prompt] * n_rollouts, decode_cfg, rng, record_states=True
    )
    w = 1.0 / n_rollouts
    return [
        ([tuple(s) for s in t.recorded_states], tuple(t.recorded_states[-1]), w)
        for t in trajs
    ]


def _tc_profile(paths, prompt_len: int, mask_id: int) -> tuple[float, float]:
    """(E_t[TC of completions given x_t], E_t[TC of x_t given the start]).

    The first averages, over step states t = 0..T-1, the KL between the
    conditional final-token joint at each visited state and its factorized
    approximation. The second measures correlation of the intermediate
    states themselves given the (deterministic) fully masked start, over
    t = 1..T.
    """
    depth = len(paths[0][0]) - 1
    if any(len(p[0]) - 1 != depth for p in paths):
        raise ContractError("paths must share one schedule depth")
    total_w = sum(w for _, _, w in paths)

    x0_terms = []
    for t in range(depth):
        groups: dict = defaultdict(list)
        for states, leaf, w in paths:
            groups[states[t]].append((leaf, w))
        tc_t = 0.0
        for state, members in groups.items():
            w_state = sum(w for _, w in members)
            arr = np.asarray(state, np.int64)
            masked = np.nonzero(arr[prompt_len:] == mask_id)[0] + prompt_len
            cond: dict = defaultdict(float)
            for leaf, w in members:
                key = tuple(leaf[p] for p in masked)
                cond[key] += w / w_state
            tc_t += (w_state / total_w) * _tc_of_conditional(dict(cond))
        x0_terms.append(tc_t)

    xt_terms = []
    for t in range(1, depth + 1):
        dist: dict = defaultdict(float)
        for states, _, w in paths:
            dist[tuple(states[t][prompt_len:])] += w / total_w
        xt_terms.append(_tc_of_conditional(dict(dist)))

    return float(np.mean(x0_terms)), float(np.mean(xt_terms))


@dataclass
class TrajectoryStateSampler:
    """Bundles what the trend report needs to visit trajectory states.

    Enumerates the decode tree exactly whenever it fits under `max_leaves`,
    otherwise falls back to `n_rollouts` Monte Carlo rollouts with
    bootstrap standard errors.
    """

    prompts: list
    teacher_decode: DecodeConfig
    student_decode: DecodeConfig
    max_leaves: int = ENUMERATION_GUARD
    n_rollouts: int = 10_000
    n_bootstrap: int = 50
    seed: int = 0


@dataclass
class ReportRow:
    quantity: str
    value: float
    std_err: float
    n_samples: int


def _profile_for(
    params: DenoiserParams,
    prompt,
    cfg: DecodeConfig,
    sampler: TrajectoryStateSampler,
    rng: np.random.Generator,
) -> tuple[float, float, float, float]:
    """(x0_tc, xt_tc, se_x0, se_xt) for one prompt under one schedule."""
    v = params.cfg.vocab_size
    if (v - 1) ** cfg.max_new_tokens <= sampler.max_leaves:
        paths = enumerate_decode_paths(params, prompt, cfg, sampler.max_leaves)
        x0, xt = _tc_profile(paths, len(prompt), params.cfg.mask_id)
        return x0, xt, 0.0, 0.0
    paths = sample_decode_paths(params, prompt, cfg, sampler.n_rollouts, rng)
    x0, xt = _tc_profile(paths, len(prompt), params.cfg.mask_id)
    boot_x0, boot_xt = [], []
    for _ in range(sampler.n_bootstrap):
        idx = rng.integers(0, len(paths), size=len(paths))
        resampled = [paths[i] for i in idx]
        b0, b1 = _tc_profile(resampled, len(prompt), params.cfg.mask_id)
        boot_x0.append(b0)
        boot_xt.append(b1)
    return x0, xt, float(np.std(boot_x0)), float(np.std(boot_xt))


def tc_reduction_report(
    teacher_params: DenoiserParams,
    student_params: DenoiserParams,
    state_sampler: TrajectoryStateSampler,
) -> list[ReportRow]:
    """Teacher-vs-student conditional total correlation over a toy instance.

    The teacher side measures the decoding distribution under the teacher's
    schedule; the student side composes the student's factorized posterior
    over its own few-step schedule. Values average over the sampler's
    prompts. The report states both values and the gap; it deliberately
    does not assert a direction.
    """
    rng = np.random.default_rng(state_sampler.seed)
    rows: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for prompt in state_sampler.prompts:
        t_x0, t_xt, t_se0, t_se1 = _profile_for(
            teacher_params, prompt, state_sampler.teacher_decode, state_sampler, rng
        )
        s_x0, s_xt, s_se0, s_se1 = _profile_for(
            student_params, prompt, state_sampler.student_decode, state_sampler, rng
        )
        rows["teacher_tc_x0"].append((t_x0, t_se0))
        rows["student_tc_x0"].append((s_x0, s_se0))
        rows["tc_x0_gap"].append((t_x0 - s_x0, np.hypot(t_se0, s_se0)))
        rows["teacher_tc_xt"].append((t_xt, t_se1))
        rows["student_tc_xt"].append((s_xt, s_se1))
    n = len(state_sampler.prompts)
    report = []
    for name, entries in rows.items():
        vals = np.array([v for v, _ in entries])
        ses = np.array([s for _, s in entries])
        # per-prompt SEs combine in quadrature under the uniform prompt average
        report.append(
            ReportRow(name, float(vals.mean()), float(np.sqrt((ses**2).sum()) / n), n)
        )
    return report


def write_report_csv(path, rows: list[ReportRow]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("quantity,value,std_err,n_samples\n")
        for r in rows:
            f.write(f"{r.quantity},{r.value!r},{r.std_err!r},{r.n_samples}\n")
