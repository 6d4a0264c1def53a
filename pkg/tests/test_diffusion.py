import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from fewstep import diffusion
from fewstep.diffusion import CorruptionConfig, NoiseSchedule, corrupt_with_random, mask_by_order, mask_sequence
from fewstep.errors import ConfigError, ContractError, DomainError

MASK = 0


def test_schedule_endpoints_and_monotonicity():
    sched = NoiseSchedule()
    assert sched.alpha(0.0) == 1.0
    assert sched.alpha(1.0) == 0.0
    ts = np.linspace(0, 1, 11)
    alphas = [sched.alpha(t) for t in ts]
    assert all(a > b for a, b in zip(alphas, alphas[1:]))
    with pytest.raises(DomainError):
        sched.alpha(1.5)


def test_mask_sequence_t0_identity():
    x = np.arange(1, 9)
    out = mask_sequence(x, 0.0, np.random.default_rng(0), MASK)
    assert np.array_equal(out, x)


def test_mask_sequence_t1_all_masked():
    x = np.arange(1, 9)
    out = mask_sequence(x, 1.0, np.random.default_rng(0), MASK)
    assert np.all(out == MASK)


def test_mask_sequence_binomial_oracle():
    x = np.ones(10000, dtype=np.int64)
    out = mask_sequence(x, 0.5, np.random.default_rng(3), MASK)
    frac = (out == MASK).mean()
    sigma = np.sqrt(0.25 / 10000)
    assert abs(frac - 0.5) < 3 * sigma


def test_mask_sequence_rejects_masked_input():
    with pytest.raises(ContractError):
        mask_sequence([1, MASK, 2], 0.5, np.random.default_rng(0), MASK)


def test_mask_sequence_rejects_bad_t():
    with pytest.raises(DomainError):
        mask_sequence([1, 2], -0.1, np.random.default_rng(0), MASK)


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_mask_sequence_keeps_or_masks_never_substitutes(seed, t):
    x = np.arange(1, 17)
    out = mask_sequence(x, t, np.random.default_rng(seed), MASK)
    assert np.all((out == x) | (out == MASK))


def test_mask_by_order_full_and_zero():
    x = np.array([5, 6, 7, 8])
    order = np.array([2, 1, 4, 3])
    assert np.array_equal(mask_by_order(x, order, 4, MASK), x)
    assert np.all(mask_by_order(x, order, 0, MASK) == MASK)
    with pytest.raises(DomainError):
        mask_by_order(x, order, -1, MASK)


def test_mask_by_order_idempotent():
    x = np.array([5, 6, 7, 8])
    order = np.array([2, 1, 4, 3])
    once = mask_by_order(x, order, 2, MASK)
    twice = mask_by_order(once, order, 2, MASK)
    assert np.array_equal(once, twice)


def test_seeded_determinism():
    x = np.arange(1, 33)
    a = mask_sequence(x, 0.4, np.random.default_rng(77), MASK)
    b = mask_sequence(x, 0.4, np.random.default_rng(77), MASK)
    assert np.array_equal(a, b)
    cfg = CorruptionConfig(p_rand=0.5, vocab_size=8, mask_id=MASK)
    xm = mask_by_order(np.arange(1, 9), np.arange(1, 9), 3, MASK)
    c = corrupt_with_random(xm, cfg, np.random.default_rng(5))
    d = corrupt_with_random(xm, cfg, np.random.default_rng(5))
    assert np.array_equal(c, d)


def test_corrupt_p0_identity():
    cfg = CorruptionConfig(p_rand=0.0, vocab_size=8, mask_id=MASK)
    x = np.array([MASK, 3, MASK, 5])
    out = corrupt_with_random(x, cfg, np.random.default_rng(0))
    assert np.array_equal(out, x)


def test_corrupt_never_touches_clean_positions():
    cfg = CorruptionConfig(p_rand=1.0, vocab_size=8, mask_id=MASK)
    x = np.array([MASK, 3, MASK, 5])
    out = corrupt_with_random(x, cfg, np.random.default_rng(0))
    assert out[1] == 3 and out[3] == 5
    assert out[0] != MASK and out[2] != MASK


def test_corrupt_histogram_uniform_chi2():
    cfg = CorruptionConfig(p_rand=1.0, vocab_size=9, mask_id=MASK)
    x = np.full(40000, MASK, dtype=np.int64)
    out = corrupt_with_random(x, cfg, np.random.default_rng(11))
    counts = np.bincount(out, minlength=9)
    assert counts[MASK] == 0
    result = stats.chisquare(counts[1:])
    assert result.pvalue > 0.01


def test_corruption_config_validation():
    with pytest.raises(ConfigError):
        CorruptionConfig(p_rand=1.5, vocab_size=8, mask_id=0)
    with pytest.raises(ConfigError):
        CorruptionConfig(p_rand=0.5, vocab_size=8, mask_id=9)
