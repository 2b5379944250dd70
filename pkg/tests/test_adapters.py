"""Adapter construction, near-identity initialization, and parameter counts."""

import math
from types import SimpleNamespace

import numpy as np
import pytest

import adapterlab as al
from adapterlab import tensor as T
from adapterlab.adapters import (
    AdapterConfig,
    adapter_forward,
    adapter_param_count,
    attach_adapters,
    init_adapter,
    layernorm_param_count,
    zero_adapter,
)
from adapterlab.errors import DimensionError, InputError
from adapterlab.tensor import Tensor

# std of N(0, s^2) restricted to +/- 2 s, relative to s
TRUNCATED_STD_FACTOR = 0.8796


def _hand_adapter():
    return al.AdapterParameters(
        w_down=Tensor([[0.1], [0.1]]),
        b_down=Tensor([0.0]),
        w_up=Tensor([[0.5, -0.5]]),
        b_up=Tensor([0.0, 0.0]),
    )


def test_forward_hand_computed_active_branch():
    out = adapter_forward(Tensor([1.0, 1.0]), _hand_adapter(), "relu")
    np.testing.assert_allclose(out.data, [1.1, 0.9], atol=1e-15)


def test_forward_hand_computed_dead_relu_branch():
    out = adapter_forward(Tensor([-1.0, -1.0]), _hand_adapter(), "relu")
    np.testing.assert_allclose(out.data, [-1.0, -1.0], atol=0.0)


def test_zero_parameters_give_bit_exact_identity(rng):
    params = zero_adapter(hidden_size=8, size=3)
    for _ in range(20):
        x = Tensor(rng.normal(size=(4, 8)))
        out = adapter_forward(x, params)
        assert np.array_equal(out.data, x.data)


def test_forward_dimension_mismatch():
    with pytest.raises(DimensionError):
        adapter_forward(Tensor(np.zeros((2, 5))), _hand_adapter())


# ---------------------------------------------------------------------------
# initialization


def test_init_sigma_zero_is_exact_zeros(rng):
    params = init_adapter(16, AdapterConfig(4, init_std=0.0), rng)
    for t in params.tensors():
        assert np.array_equal(t.data, np.zeros_like(t.data))


def test_init_truncates_at_two_standard_deviations(rng):
    params = init_adapter(64, AdapterConfig(16, init_std=1e-2), rng)
    for t in params.tensors():
        assert np.abs(t.data).max() <= 0.02


def test_init_matches_truncated_normal_std_oracle():
    # empirical std over ~1e5 samples against the truncated-normal moment
    rng = np.random.default_rng(5)
    samples = T.truncated_normal(rng, (100_000,), 1e-2)
    expected = 1e-2 * TRUNCATED_STD_FACTOR
    assert abs(samples.std() - expected) / expected < 0.15


def test_init_rejects_oversized_bottleneck(rng):
    with pytest.raises(InputError):
        init_adapter(4, AdapterConfig(5), rng)


def test_init_warns_on_degenerate_bottleneck(rng):
    with pytest.warns(UserWarning, match="degenerate"):
        init_adapter(4, AdapterConfig(4), rng)


def test_config_validation():
    with pytest.raises(InputError):
        AdapterConfig(0)
    with pytest.raises(InputError):
        AdapterConfig(4, init_std=-1e-3)
    with pytest.raises(InputError):
        AdapterConfig(4, nonlinearity="sigmoid")


# ---------------------------------------------------------------------------
# attachment


def test_attach_two_layers_yields_four_modules(random_base):
    rng = np.random.default_rng(0)
    pairs = attach_adapters(random_base, AdapterConfig(4), rng)
    assert len(pairs) == random_base.config.num_layers == 2
    modules = [m for p in pairs for m in (p.attention, p.ffn)]
    assert len(modules) == 4


def test_attach_twenty_four_layer_geometry_yields_48_modules():
    # attachment depends only on the geometry, so a config stub suffices
    config = al.ModelConfig(
        num_layers=24, hidden_size=64, num_heads=4, ffn_size=128, vocab_size=8, max_seq_len=8
    )
    pairs = attach_adapters(SimpleNamespace(config=config), AdapterConfig(8), np.random.default_rng(0))
    assert sum(2 for _ in pairs) == 48


def test_attach_leaves_base_untouched(random_base):
    before = random_base.value_copy()
    attach_adapters(random_base, AdapterConfig(4), np.random.default_rng(1))
    after = random_base.value_copy()
    assert all(np.array_equal(before[k], after[k]) for k in before)


# ---------------------------------------------------------------------------
# counting


@pytest.mark.parametrize(
    "d,m,expected", [(2, 1, 7), (1024, 64, 132_160), (768, 8, 13_064)]
)
def test_adapter_param_count_formula(d, m, expected):
    assert adapter_param_count(d, m) == expected


@pytest.mark.parametrize("d,sites,expected", [(768, 25, 38_400), (1, 1, 2), (32, 5, 320)])
def test_layernorm_param_count_formula(d, sites, expected):
    assert layernorm_param_count(d, sites) == expected


@pytest.mark.parametrize("d,m", [(4, 1), (16, 4), (32, 8), (64, 64)])
def test_constructed_count_agrees_with_formula(d, m):
    rng = np.random.default_rng(0)
    with pytest.warns(UserWarning) if m == d else _no_warning():
        params = init_adapter(d, AdapterConfig(m), rng)
    assert params.element_count() == adapter_param_count(d, m)


def _no_warning():
    import contextlib

    return contextlib.nullcontext()


# ---------------------------------------------------------------------------
# near-identity behavior


@pytest.mark.parametrize("sigma", [1e-4, 1e-3, 1e-2])
def test_near_identity_bound(sigma):
    # ReLU is 1-Lipschitz with phi(0)=0, so with entries in [-2s, 2s] and
    # |x|_inf <= 1 the output deviates by at most 4 s^2 m (d+1) + 2 s.
    d, m = 24, 6
    rng = np.random.default_rng(42)
    params = init_adapter(d, AdapterConfig(m, init_std=sigma), rng)
    bound = 4.0 * sigma**2 * m * (d + 1) + 2.0 * sigma
    for _ in range(50):
        x = Tensor(rng.uniform(-1.0, 1.0, size=(8, d)))
        out = adapter_forward(x, params)
        assert np.abs(out.data - x.data).max() <= bound


def test_mean_deviation_monotone_in_sigma():
    d, m = 16, 4
    sigmas = [10.0**e for e in range(-7, 1)]
    means = []
    for i, sigma in enumerate(sigmas):
        rng = np.random.default_rng(100 + i)
        params = init_adapter(d, AdapterConfig(m, init_std=sigma), rng)
        x = Tensor(rng.normal(size=(128, d)))
        out = adapter_forward(x, params)
        means.append(float(np.linalg.norm(out.data - x.data, axis=1).mean()))
    assert all(a <= b for a, b in zip(means, means[1:]))


def test_gradient_reaches_down_projection(rng):
    params = init_adapter(12, AdapterConfig(3, init_std=1e-2), rng)
    x = Tensor(rng.normal(size=(5, 12)))  # frozen input
    out = adapter_forward(x, params, "relu")
    T.backward(T.sum_all(out))
    assert params.w_down.grad is not None
    assert np.abs(params.w_down.grad).max() > 0.0
    assert x.grad is None
