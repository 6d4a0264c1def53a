import itertools
import math

import numpy as np
import pytest
from scipy import optimize

from fewstep.analysis import (
    ExactDistribution,
    TrajectoryStateSampler,
    conditional_tc,
    enumerate_decode_paths,
    enumerate_posterior,
    kl_decomposition_check,
    kl_divergence,
    sample_decode_paths,
    tc_reduction_report,
    write_report_csv,
)
from fewstep.decoder import DecodeConfig
from fewstep.errors import CapacityError, ContractError, DomainError

from conftest import TINY_CFG

V = TINY_CFG.vocab_size
MASK = TINY_CFG.mask_id


def _masked_state(rng, positions):
    x_t = rng.integers(1, V, size=16)
    x_t[positions] = MASK
    return x_t


# ---------------------------------------------------------------------------
# enumerate_posterior
# ---------------------------------------------------------------------------


def test_posterior_zero_positions_point_mass(tiny_params):
    dist = enumerate_posterior(tiny_params, [1] * 16, [])
    assert dist.support == [()]
    assert dist.probs[0] == 1.0


def test_posterior_single_position_is_softmax_row(tiny_params):
    from fewstep.denoiser import forward_logits

    x_t = _masked_state(np.random.default_rng(0), [7])
    dist = enumerate_posterior(tiny_params, x_t, [7])
    row = forward_logits(tiny_params, x_t).data[7]
    want = np.exp(row - row.max())
    want /= want.sum()
    got = np.array([dist.as_dict()[(v,)] for v in range(V)])
    assert np.abs(got - want).max() < 1e-12


def test_posterior_matches_sampling_within_3_sigma(tiny_params):
    rng = np.random.default_rng(1)
    positions = [3, 9]
    x_t = _masked_state(rng, positions)
    dist = enumerate_posterior(tiny_params, x_t, positions)
    table = dist.as_dict()

    from fewstep.denoiser import forward_logits

    rows = forward_logits(tiny_params, x_t).data[positions]
    probs = np.exp(rows - rows.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    n = 100_000
    draw_rng = np.random.default_rng(3)
    draws = np.stack(
        [draw_rng.choice(V, size=n, p=probs[i]) for i in range(2)], axis=1
    )
    # compare the 20 most likely tuples; multinomial 3-sigma bounds each
    top = sorted(table, key=table.get, reverse=True)[:20]
    for key in top:
        p = table[key]
        freq = np.mean((draws[:, 0] == key[0]) & (draws[:, 1] == key[1]))
        sigma = math.sqrt(p * (1 - p) / n)
        assert abs(freq - p) < 3 * sigma + 1e-12


def test_posterior_capacity_guard(tiny_params):
    with pytest.raises(CapacityError):
        enumerate_posterior(tiny_params, [MASK] * 16, list(range(16)))


def test_posterior_total_mass():
    # validated by the ExactDistribution constructor; a broken table raises
    with pytest.raises(ContractError):
        ExactDistribution([(0,), (1,)], np.array([0.6, 0.6]))


# ---------------------------------------------------------------------------
# conditional_tc
# ---------------------------------------------------------------------------


def _pair_joint(entries):
    support = [e[0] for e in entries]
    probs = np.array([e[1] for e in entries])
    return ExactDistribution(support, probs)


def test_tc_zero_for_conditionally_independent():
    # two binary tokens independent given each of two conditioning states
    entries = []
    for y, (p0, p1) in (((0,), (0.3, 0.2)), ((1,), (0.6, 0.9))):
        for a, b in itertools.product([0, 1], repeat=2):
            pa = p0 if a else 1 - p0
            pb = p1 if b else 1 - p1
            entries.append((((a, b), y), 0.5 * pa * pb))
    assert conditional_tc(_pair_joint(entries)) < 1e-14


def test_tc_ln2_for_perfectly_correlated_pair():
    entries = [
        (((0, 0), (0,)), 0.5),
        (((1, 1), (0,)), 0.5),
    ]
    assert abs(conditional_tc(_pair_joint(entries)) - math.log(2)) < 1e-10


def test_tc_nonnegative_and_zero_iff_factorized():
    rng = np.random.default_rng(2)
    # random correlated joint: TC strictly positive
    raw = rng.random((2, 2)) + 0.05
    raw[0, 0] += 1.0
    raw /= raw.sum()
    entries = [(((a, b), (0,)), raw[a, b]) for a in range(2) for b in range(2)]
    tc = conditional_tc(_pair_joint(entries))
    assert tc > 1e-4
    # its factorization has TC exactly ~0
    ma, mb = raw.sum(1), raw.sum(0)
    fact = [(((a, b), (0,)), ma[a] * mb[b]) for a in range(2) for b in range(2)]
    assert conditional_tc(_pair_joint(fact)) < 1e-14


def test_model_induced_posterior_has_zero_tc(tiny_params):
    positions = [2, 11]
    x_t = _masked_state(np.random.default_rng(3), positions)
    dist = enumerate_posterior(tiny_params, x_t, positions)
    entries = [
        ((sup, tuple(x_t.tolist())), p) for sup, p in zip(dist.support, dist.probs)
    ]
    assert conditional_tc(_pair_joint(entries)) < 1e-10


# ---------------------------------------------------------------------------
# KL decomposition (chain rule identity)
# ---------------------------------------------------------------------------


def _random_joint(rng, nx=3, ny=2):
    raw = rng.random((nx, ny)) + 1e-3
    raw /= raw.sum()
    return ExactDistribution(
        [((x,), (y,)) for x in range(nx) for y in range(ny)],
        raw.reshape(-1),
    )


def test_kl_decomposition_identical_joints():
    p = _random_joint(np.random.default_rng(4))
    lhs, rhs, residual = kl_decomposition_check(p, p)
    assert lhs == 0.0 and rhs == 0.0 and residual == 0.0


def test_kl_decomposition_equal_marginals():
    rng = np.random.default_rng(5)
    ny = 2
    py = np.array([0.4, 0.6])
    conds = rng.random((2, ny, 3)) + 1e-3
    conds /= conds.sum(axis=2, keepdims=True)
    joints = []
    for c in conds:
        entries = [
            (((x,), (y,)), py[y] * c[y, x]) for x in range(3) for y in range(ny)
        ]
        joints.append(_pair_joint(entries))
    lhs, rhs, residual = kl_decomposition_check(*joints)
    # marginal term vanishes: lhs equals the expected conditional KL
    want = sum(
        py[y] * kl_divergence(
            {x: conds[0, y, x] for x in range(3)},
            {x: conds[1, y, x] for x in range(3)},
        )
        for y in range(ny)
    )
    assert residual < 1e-12
    assert abs(lhs - want) < 1e-12


def test_kl_decomposition_100_random_joints():
    rng = np.random.default_rng(6)
    for _ in range(100):
        p = _random_joint(rng)
        q = _random_joint(rng)
        _, _, residual = kl_decomposition_check(p, q)
        assert residual < 1e-12


def test_kl_support_violation_raises():
    p = ExactDistribution([((0,), (0,)), ((1,), (0,))], np.array([0.5, 0.5]))
    q = ExactDistribution([((0,), (0,))], np.array([1.0]))
    with pytest.raises(DomainError):
        kl_decomposition_check(p, q)


# ---------------------------------------------------------------------------
# Pythagorean inequality on log-convex families
# ---------------------------------------------------------------------------


def _log_convex_member(q0, q1, lam):
    z = q0 ** (1 - lam) * q1**lam
    return z / z.sum()


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_pythagorean_inequality_on_log_convex_family(seed):
    # On a one-parameter log-geodesic the inequality is tight at interior
    # minimizers, so q* must be located to high precision: a dense grid scan
    # confirms unimodality, then the stationarity condition is root-found.
    rng = np.random.default_rng(seed)
    n = 6
    p = rng.random(n) + 0.05
    p /= p.sum()
    q0 = rng.random(n) + 0.05
    q0 /= q0.sum()
    q1 = rng.random(n) + 0.05
    q1 /= q1.sum()

    def kl(a, b):
        return float(np.sum(a * np.log(a / b)))

    def objective(lam):
        return kl(p, _log_convex_member(q0, q1, lam))

    theta = np.log(q1 / q0)

    def stationarity(lam):
        # d/dlam KL(p || q_lam) = E_{q_lam}[theta] - E_p[theta]
        return float(_log_convex_member(q0, q1, lam) @ theta - p @ theta)

    grid = np.linspace(0, 1, 2001)
    best = grid[int(np.argmin([objective(g) for g in grid]))]
    if stationarity(0.0) >= 0.0:
        lam_star = 0.0
    elif stationarity(1.0) <= 0.0:
        lam_star = 1.0
    else:
        lam_star = optimize.brentq(stationarity, 0.0, 1.0, xtol=1e-15)
    assert abs(lam_star - best) < 1e-3  # grid scan agrees with the root
    q_star = _log_convex_member(q0, q1, lam_star)

    for lam_r in np.linspace(0, 1, 11):
        r = _log_convex_member(q0, q1, lam_r)
        assert kl(p, r) >= kl(p, q_star) + kl(q_star, r) - 1e-9


# ---------------------------------------------------------------------------
# decode-tree enumeration and the trend report
# ---------------------------------------------------------------------------

A5_CFG_KW = dict(vocab_size=6, mask_id=0, d_model=16, n_layers=1, n_heads=2,
                 d_ff=32, max_len=6, block_size=3)


@pytest.fixture
def small_params():
    from fewstep.denoiser import ModelConfig, init_params

    params = init_params(ModelConfig(**A5_CFG_KW), seed=3)
    rng = np.random.default_rng(9)
    params["out_proj"].data[...] = rng.normal(0, 0.4, params["out_proj"].shape)
    return params


def _decode_cfg(temp, steps_per_block=3):
    mode = "full" if steps_per_block == 3 else "static"
    return DecodeConfig(
        block_size=3, mode=mode, steps_per_block=steps_per_block,
        temperature=temp, max_new_tokens=3,
    )


def test_enumerated_paths_probabilities_sum_to_one(small_params):
    paths = enumerate_decode_paths(small_params, [1, 2, 3], _decode_cfg(1.0))
    total = sum(p for _, _, p in paths)
    assert abs(total - 1.0) < 1e-10
    assert all(len(states) == 4 for states, _, _ in paths)  # 3 steps + start


def test_enumeration_matches_rollout_frequencies(small_params):
    cfg = _decode_cfg(1.0)
    paths = enumerate_decode_paths(small_params, [1, 2, 3], cfg)
    exact = {leaf: p for _, leaf, p in paths}
    rng = np.random.default_rng(0)
    n = 20_000
    sampled = sample_decode_paths(small_params, [1, 2, 3], cfg, n, rng)
    freq: dict = {}
    for _, leaf, w in sampled:
        freq[leaf] = freq.get(leaf, 0.0) + w
    for leaf, p in sorted(exact.items(), key=lambda kv: -kv[1])[:10]:
        sigma = math.sqrt(p * (1 - p) / n)
        assert abs(freq.get(leaf, 0.0) - p) < 4 * sigma + 1e-9


def test_greedy_tree_is_single_path(small_params):
    paths = enumerate_decode_paths(small_params, [1, 2, 3], _decode_cfg(0.0))
    assert len(paths) == 1
    assert paths[0][2] == 1.0


def _sampler(prompts, t_cfg, s_cfg):
    return TrajectoryStateSampler(
        prompts=prompts, teacher_decode=t_cfg, student_decode=s_cfg
    )


def test_tc_report_gap_zero_for_identical_models(small_params):
    cfg = _decode_cfg(1.0)
    rows = tc_reduction_report(
        small_params, small_params, _sampler([[1, 2, 3]], cfg, cfg)
    )
    by_name = {r.quantity: r for r in rows}
    assert by_name["tc_x0_gap"].value == 0.0
    assert by_name["teacher_tc_x0"].std_err == 0.0  # exact enumeration


def test_tc_report_deterministic_teacher_all_zero(small_params):
    cfg = _decode_cfg(0.0)  # greedy: one trajectory, no spread
    rows = tc_reduction_report(
        small_params, small_params, _sampler([[1, 2, 3]], cfg, cfg)
    )
    by_name = {r.quantity: r for r in rows}
    assert by_name["teacher_tc_x0"].value == 0.0
    assert by_name["teacher_tc_xt"].value == 0.0


def test_one_shot_student_has_zero_tc(small_params):
    teacher_cfg = _decode_cfg(1.0)
    student_cfg = _decode_cfg(1.0, steps_per_block=1)
    rows = tc_reduction_report(
        small_params, small_params, _sampler([[1, 2, 3]], teacher_cfg, student_cfg)
    )
    by_name = {r.quantity: r for r in rows}
    assert by_name["student_tc_x0"].value < 1e-12
    assert by_name["teacher_tc_x0"].value >= 0.0


def test_report_csv_format(small_params, tmp_path):
    cfg = _decode_cfg(1.0)
    rows = tc_reduction_report(
        small_params, small_params, _sampler([[1, 2, 3]], cfg, cfg)
    )
    out = tmp_path / "tc.csv"
    write_report_csv(out, rows)
    lines = out.read_text().splitlines()
    assert lines[0] == "quantity,value,std_err,n_samples"
    assert len(lines) == len(rows) + 1
