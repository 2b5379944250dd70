"""Bottleneck adapter modules: construction, near-identity init, counting.

An adapter projects d-dimensional features down to a small width, applies a
nonlinearity, projects back up, and adds the result to its input through an
internal skip connection. With weights and biases near zero the module is
near-identity, so a freshly adapted network computes (almost) the frozen
base network's function.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, InputError
from .tensor import Tensor

NONLINEARITIES = {"relu": T.relu, "gelu": T.gelu, "tanh": T.tanh}


@dataclass(frozen=True)
class AdapterConfig:
    """Geometry and initialization of one adapter module."""

    size: int
    init_std: float = 1e-2
    nonlinearity: str = "relu"

    def __post_init__(self):
        if self.size < 1:
            raise InputError(f"adapter size must be >= 1, got {self.size}")
        if self.init_std < 0:
            raise InputError(f"init_std must be >= 0, got {self.init_std}")
        if self.nonlinearity not in NONLINEARITIES:
            raise InputError(
                f"unknown nonlinearity {self.nonlinearity!r}; "
                f"expected one of {sorted(NONLINEARITIES)}"
            )


@dataclass
class AdapterParameters:
    """The four arrays of one bottleneck adapter."""

    w_down: Tensor  # (d, m)
    b_down: Tensor  # (m,)
    w_up: Tensor  # (m, d)
    b_up: Tensor  # (d,)

    @property
    def hidden_size(self) -> int:
        return self.w_down.shape[0]

    @property
    def size(self) -> int:
        return self.w_down.shape[1]

    def tensors(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return self.w_down, self.b_down, self.w_up, self.b_up

    def element_count(self) -> int:
        return sum(t.size for t in self.tensors())


@dataclass
class LayerAdapterPair:
    """The two serial adapters of one Transformer layer."""

    attention: AdapterParameters
    ffn: AdapterParameters


def adapter_param_count(hidden_size: int, size: int) -> int:
    """Elements of one adapter including biases: 2 m d + d + m."""
    if hidden_size < 1 or size < 1:
        raise InputError(f"expected positive dimensions, got d={hidden_size}, m={size}")
    return 2 * size * hidden_size + hidden_size + size


def layernorm_param_count(hidden_size: int, num_sites: int) -> int:
    """Elements of the scale/shift pairs over ``num_sites`` layer norms: 2 d per site."""
    if hidden_size < 1 or num_sites < 1:
        raise InputError(f"expected positive inputs, got d={hidden_size}, sites={num_sites}")
    return 2 * hidden_size * num_sites


def init_adapter(hidden_size: int, config: AdapterConfig, rng: np.random.Generator) -> AdapterParameters:
    """Sample all four arrays i.i.d. from a +/-2 std truncated Gaussian.

    init_std = 0 yields exact zeros, i.e. an exact identity module.
    """
    m = config.size
    if m > hidden_size:
        raise InputError(f"adapter size {m} exceeds hidden size {hidden_size}")
    if m == hidden_size:
        warnings.warn(
            f"adapter size {m} equals the hidden size; the bottleneck is degenerate",
            stacklevel=2,
        )
    std = config.init_std
    return AdapterParameters(
        w_down=Tensor(T.truncated_normal(rng, (hidden_size, m), std), requires_grad=True),
        b_down=Tensor(T.truncated_normal(rng, (m,), std), requires_grad=True),
        w_up=Tensor(T.truncated_normal(rng, (m, hidden_size), std), requires_grad=True),
        b_up=Tensor(T.truncated_normal(rng, (hidden_size,), std), requires_grad=True),
    )


def zero_adapter(hidden_size: int, size: int) -> AdapterParameters:
    """An exact-identity adapter (all zeros, frozen); used for span ablation."""
    return AdapterParameters(
        w_down=Tensor(np.zeros((hidden_size, size))),
        b_down=Tensor(np.zeros(size)),
        w_up=Tensor(np.zeros((size, hidden_size))),
        b_up=Tensor(np.zeros(hidden_size)),
    )


def adapter_forward(x: Tensor, params: AdapterParameters, nonlinearity: str = "relu") -> Tensor:
    """x + phi(x W_down + b_down) W_up + b_up over the last axis."""
    d = params.hidden_size
    if x.shape[-1] != d:
        raise DimensionError(f"adapter expects last extent {d}, got input shape {x.shape}")
    phi = NONLINEARITIES[nonlinearity]
    flat = T.reshape(x, (-1, d))
    hidden = phi(T.add(T.matmul(flat, params.w_down), params.b_down))
    delta = T.add(T.matmul(hidden, params.w_up), params.b_up)
    return T.reshape(T.add(flat, delta), x.shape)


def attach_adapters(base, config: AdapterConfig, rng: np.random.Generator) -> list[LayerAdapterPair]:
    """Create the 2 L adapter modules for a base model: one after each sub-layer.

    The base parameters are not touched; draw order is layer-ascending,
    attention before feed-forward, so a given rng state is reproducible.
    """
    d = base.config.hidden_size
    return [
        LayerAdapterPair(
            attention=init_adapter(d, config, rng),
            ffn=init_adapter(d, config, rng),
        )
        for _ in range(base.config.num_layers)
    ]
