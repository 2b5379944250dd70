"""Adam with bias correction and the linear warmup / linear decay schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import ContractError, InputError
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run."""

    peak_lr: float
    total_steps: int
    warmup_fraction: float = 0.1
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise InputError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.total_steps < 1:
            raise InputError(f"total_steps must be positive, got {self.total_steps}")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise InputError(f"warmup_fraction must lie in (0, 1), got {self.warmup_fraction}")
        if self.batch_size < 1:
            raise InputError(f"batch_size must be positive, got {self.batch_size}")

    def to_dict(self) -> dict:
        return {
            "peak_lr": self.peak_lr,
            "total_steps": self.total_steps,
            "warmup_fraction": self.warmup_fraction,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }


def epochs_to_steps(num_epochs: int, train_size: int, batch_size: int) -> int:
    """total_steps = epochs * ceil(train_size / batch_size)."""
    if num_epochs < 1 or train_size < 1 or batch_size < 1:
        raise InputError("epochs, train_size and batch_size must all be positive")
    return num_epochs * math.ceil(train_size / batch_size)


def lr_at(step: float, config: TrainConfig) -> float:
    """Piecewise-linear rate: 0 -> peak over the warmup span, then peak -> 0."""
    total = config.total_steps
    if not 0 <= step <= total:
        raise InputError(f"step {step} outside schedule range [0, {total}]")
    warmup_end = config.warmup_fraction * total
    if step <= warmup_end:
        return config.peak_lr * step / warmup_end
    return config.peak_lr * (total - step) / (total - warmup_end)


class Adam:
    """Standard Adam over a named set of trainable tensors.

    Missing gradients (parameters untouched by the last backward pass) count
    as zeros. ``frozen`` tensors are checked each step: a gradient on one of
    them means the freezing contract was breached somewhere upstream.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        config: TrainConfig,
        frozen: Iterable[Tensor] = (),
    ):
        self.params = dict(params)
        self.config = config
        self.frozen = tuple(frozen)
        self.step_count = 0
        self._m = {name: np.zeros_like(t.data) for name, t in self.params.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in self.params.items()}

    def step(self, lr: float) -> None:
        for t in self.frozen:
            if t.grad is not None:
                raise ContractError("freezing breach: gradient present on a frozen parameter")
        c = self.config
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - c.beta1**t
        bias2 = 1.0 - c.beta2**t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            self._m[name] = c.beta1 * self._m[name] + (1.0 - c.beta1) * g
            self._v[name] = c.beta2 * self._v[name] + (1.0 - c.beta2) * np.square(g)
            m_hat = self._m[name] / bias1
            v_hat = self._v[name] / bias2
            p.data -= lr * m_hat / (np.sqrt(v_hat) + c.eps)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None
