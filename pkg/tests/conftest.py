import numpy as np
import pytest

from foresight.model import (
    ForecasterConfig,
    init_weights,
    named_params,
    set_param,
)


TINY = ForecasterConfig(
    n_layers=2, d_model=8, n_heads=2, d_in=4,
    seq_frames=3, context_frames=2, grid_h=2, grid_w=2,
)


def randomized_weights(config, seed, scale=0.3, dtype=np.float64):
    """Weights with every tensor non-trivial, so tests exercise all paths."""
    rng = np.random.default_rng(seed)
    w = init_weights(config, seed, dtype=dtype)
    for name, arr in named_params(w):
        base = 1.0 if name.endswith("norm_gain") else 0.0
        set_param(w, name, (base + scale * rng.standard_normal(arr.shape)).astype(dtype))
    return w


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_weights():
    return randomized_weights(TINY, seed=7)
