"""Dense float64 tensors with a reverse-mode autodiff tape.

Ops compute eagerly with numpy and append one tape entry per differentiable
call. ``backward`` replays the tape in reverse execution order (a valid
reverse-topological order by construction), accumulates adjoints, deposits
them on every tensor that requires gradients, and clears the tape. One
training step therefore owns exactly one graph.

The tape is thread-local: concurrent workers own independent graphs while
sharing read-only parameter tensors.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, InputError, NumericError

Array = np.ndarray

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


class Tensor:
    """A dense n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d scalars 0-d
        self.data: Array = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass
class TapeEntry:
    """One executed operation: output, inputs, and its adjoint rule."""

    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[Array], Sequence[Array | None]]


class _TapeState(threading.local):
    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.enabled = True


_TAPE = _TapeState()


def tape_entries() -> list[TapeEntry]:
    """Snapshot of the current thread's recorded operations (diagnostics)."""
    return list(_TAPE.entries)


def clear_tape() -> None:
    _TAPE.entries.clear()


@contextmanager
def no_grad():
    """Disable tape recording; outputs inside the block never require grad."""
    previous = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = previous


def _op(name: str, out_data: Array, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"{name} produced non-finite values")
    requires = _TAPE.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    if requires:
        _TAPE.entries.append(TapeEntry(name, inputs, out, backward))
    return out


def _deposit(tensor: Tensor, grad: Array) -> None:
    tensor.grad = grad if tensor.grad is None else tensor.grad + grad


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    Walks the tape once in reverse execution order; each recorded operation
    is visited exactly once. Frozen tensors (``requires_grad=False``) never
    receive a gradient. The tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    entries = _TAPE.entries
    try:
        adjoint: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {id(loss): loss}
        for entry in reversed(entries):
            out_grad = adjoint.pop(id(entry.output), None)
            if out_grad is None:
                continue  # recorded, but does not feed this loss
            leaves.pop(id(entry.output), None)
            if entry.output.requires_grad:
                _deposit(entry.output, out_grad)
            for tensor, grad in zip(entry.inputs, entry.backward(out_grad)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + grad
                else:
                    adjoint[key] = grad
                    leaves[key] = tensor
        for key, tensor in leaves.items():
            _deposit(tensor, adjoint[key])
    finally:
        entries.clear()


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Elementwise and shape ops


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g: Array):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _op("add", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g: Array):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _op("mul", out, (a, b), bwd)


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * factor

    def bwd(g: Array):
        return (g * factor,)

    return _op("scale", out, (x,), bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def bwd(g: Array):
        return (g.reshape(x.shape),)

    return _op("reshape", out, (x,), bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = x.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g: Array):
        return (g.transpose(inverse),)

    return _op("transpose", out, (x,), bwd)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows along the first axis; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise InputError(f"take_rows expects a flat index list, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise InputError(
            f"take_rows index out of range: valid [0, {x.shape[0]}), got "
            f"[{idx.min()}, {idx.max()}]"
        )
    out = x.data[idx]

    def bwd(g: Array):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _op("take_rows", out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum())

    def bwd(g: Array):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _op("sum_all", out, (x,), bwd)


# ---------------------------------------------------------------------------
# Matrix products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bwd(g: Array):
        return g @ b.data.T, a.data.T @ g

    return _op("matmul", out, (a, b), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over matching leading batch axes."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise DimensionError(f"bmm expects 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm shapes incompatible: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bwd(g: Array):
        return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    return _op("bmm", out, (a, b), bwd)


# ---------------------------------------------------------------------------
# Nonlinearities


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bwd(g: Array):
        return (g * (x.data > 0.0),)

    return _op("relu", out, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bwd(g: Array):
        return (g * (1.0 - out * out),)

    return _op("tanh", out, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    v = x.data
    inner = _SQRT_2_OVER_PI * (v + _GELU_CUBIC * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bwd(g: Array):
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner),)

    return _op("gelu", out, (x,), bwd)


# ---------------------------------------------------------------------------
# Normalization and loss


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, shift-stabilized."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g: Array):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _op("softmax", out, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Standardize over the last axis, then apply elementwise gamma * xhat + beta."""
    if eps <= 0.0:
        raise InputError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm parameter shapes {gamma.shape}/{beta.shape} do not match width {d}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = gamma.data * xhat + beta.data

    def bwd(g: Array):
        g_gamma = (g * xhat).reshape(-1, d).sum(axis=0)
        g_beta = g.reshape(-1, d).sum(axis=0)
        gy = g * gamma.data
        g_x = inv * (
            gy
            - gy.mean(axis=-1, keepdims=True)
            - xhat * (gy * xhat).mean(axis=-1, keepdims=True)
        )
        return g_x, g_gamma, g_beta

    return _op("layer_norm", out, (x, gamma, beta), bwd)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class; grad is (softmax - onehot)/n."""
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects 2-D logits, got {logits.shape}")
    y = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if y.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise InputError(f"label out of range [0, {k}): got {y[(y < 0) | (y >= k)][0]}")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    loss = np.asarray(-log_probs[np.arange(n), y].mean())
    probs = np.exp(log_probs)

    def bwd(g: Array):
        gl = probs.copy()
        gl[np.arange(n), y] -= 1.0
        gl *= float(g) / n
        return (gl,)

    return _op("softmax_cross_entropy", loss, (logits,), bwd)


# ---------------------------------------------------------------------------
# Initialization helpers


def truncated_normal(rng: np.random.Generator, shape, std: float) -> Array:
    """Zero-mean Gaussian, rejection-sampled into [-2 std, +2 std].

    std = 0 yields exact zeros. Rejection (not clipping) preserves the
    truncated distribution's moments.
    """
    if std < 0:
        raise InputError(f"standard deviation must be non-negative, got {std}")
    if std == 0.0:
        return np.zeros(shape, dtype=np.float64)
    values = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    out_of_range = np.abs(values) > bound
    while out_of_range.any():
        values[out_of_range] = rng.normal(0.0, std, size=int(out_of_range.sum()))
        out_of_range = np.abs(values) > bound
    return values
