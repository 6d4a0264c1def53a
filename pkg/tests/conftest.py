import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fewstep import denoiser

settings.register_profile(
    "ci",
    derandomize=True,
    max_examples=50,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


TINY_CFG = denoiser.ModelConfig(
    vocab_size=17, mask_id=0, d_model=32, n_layers=2, n_heads=4,
    d_ff=64, max_len=16, block_size=4,
)


@pytest.fixture
def tiny_cfg():
    return TINY_CFG


@pytest.fixture
def tiny_params():
    params = denoiser.init_params(TINY_CFG, seed=0)
    # break the zero-init output projection so logits are informative
    rng = np.random.default_rng(123)
    params["out_proj"].data[...] = rng.normal(0.0, 0.05, params["out_proj"].shape)
    return params


def finite_difference(build_loss, tensor, coords, h=1e-5):
    """Central finite differences of a float-valued closure w.r.t. tensor coords."""
    out = []
    for coord in coords:
        orig = tensor.data[coord]
        tensor.data[coord] = orig + h
        f_plus = build_loss()
        tensor.data[coord] = orig - h
        f_minus = build_loss()
        tensor.data[coord] = orig
        out.append((f_plus - f_minus) / (2 * h))
    return np.array(out)


def relative_error(got, want, floor=1e-8):
    got = np.asarray(got, dtype=float)
    want = np.asarray(want, dtype=float)
    return np.abs(got - want) / np.maximum(np.maximum(np.abs(got), np.abs(want)), floor)
