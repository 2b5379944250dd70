"""Tensor ops, the tape, and gradient correctness against finite differences."""

import math

import numpy as np
import pytest

import adapterlab as al
from adapterlab import tensor as T
from adapterlab.errors import ContractError, DimensionError, InputError, NumericError
from adapterlab.tensor import Tensor

from gradcheck import assert_grads_match, finite_difference_grad, relative_error


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    v = Tensor([[3.0], [7.0]])
    assert np.array_equal(T.matmul(eye, v).data, [[3.0], [7.0]])


def test_matmul_hand_computed():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    assert np.array_equal(T.matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_zero_annihilates():
    zeros = Tensor(np.zeros((2, 3)))
    any_b = Tensor(np.arange(12.0).reshape(3, 4))
    assert np.array_equal(T.matmul(zeros, any_b).data, np.zeros((2, 4)))


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 4\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))


# ---------------------------------------------------------------------------
# layer_norm


def test_layer_norm_constant_row_is_zero():
    x = Tensor(np.full((3, 4), 2.5))
    out = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert np.array_equal(out.data, np.zeros((3, 4)))


def test_layer_norm_hand_computed():
    # mean 2, std 1 -> standardized row is [-1, 1] as eps -> 0
    out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-9)


def test_layer_norm_zero_gamma_broadcasts_beta():
    x = Tensor(np.random.default_rng(0).normal(size=(5, 3)))
    beta = Tensor([1.0, 2.0, 3.0])
    out = T.layer_norm(x, Tensor(np.zeros(3)), beta)
    assert np.array_equal(out.data, np.tile(beta.data, (5, 1)))


def test_layer_norm_width_mismatch():
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_layer_norm_requires_positive_eps():
    with pytest.raises(InputError):
        T.layer_norm(Tensor(np.zeros((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)


# ---------------------------------------------------------------------------
# softmax / cross entropy


def test_cross_entropy_uniform_binary():
    loss = T.softmax_cross_entropy(Tensor([[0.0, 0.0]]), [0])
    assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_cross_entropy_uniform_k_ary():
    k = 7
    loss = T.softmax_cross_entropy(Tensor(np.ones((3, k))), [0, 3, 6])
    assert loss.item() == pytest.approx(math.log(k), abs=1e-12)


def test_cross_entropy_hand_computed():
    loss = T.softmax_cross_entropy(Tensor([[2.0, 0.0]]), [0])
    expected = -math.log(math.exp(2.0) / (math.exp(2.0) + 1.0))
    assert loss.item() == pytest.approx(expected, abs=1e-12)
    assert loss.item() == pytest.approx(0.126928, abs=1e-6)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    logits = Tensor([[2.0, 0.0], [0.0, 0.0]], requires_grad=True)
    loss = T.softmax_cross_entropy(logits, [0, 1])
    T.backward(loss)
    probs = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
    onehot = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(logits.grad, (probs - onehot) / 2.0, atol=1e-12)


def test_cross_entropy_rejects_out_of_range_label():
    with pytest.raises(InputError, match="label out of range"):
        T.softmax_cross_entropy(Tensor([[0.0, 0.0]]), [2])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    out = T.softmax(Tensor(rng.normal(scale=4.0, size=(20, 9))))
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(20), atol=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(10, 6))
    shift = rng.normal(scale=50.0, size=(10, 1))
    np.testing.assert_allclose(
        T.softmax(Tensor(x)).data, T.softmax(Tensor(x + shift)).data, atol=1e-9
    )


# ---------------------------------------------------------------------------
# backward and the tape


def test_backward_of_sum_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    T.backward(T.sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_leaves_unrelated_tensor_without_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    T.backward(T.sum_all(T.scale(y, 2.0)))
    assert x.grad is None or np.array_equal(x.grad, np.zeros(3))
    assert np.array_equal(y.grad, 2.0 * np.ones(3))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.scale(x, 1.0))


def test_backward_two_layer_mlp_matches_finite_differences(rng):
    w1 = Tensor(rng.normal(scale=0.5, size=(4, 5)), requires_grad=True)
    b1 = Tensor(rng.normal(scale=0.1, size=5), requires_grad=True)
    w2 = Tensor(rng.normal(scale=0.5, size=(5, 3)), requires_grad=True)
    b2 = Tensor(rng.normal(scale=0.1, size=3), requires_grad=True)
    x = Tensor(rng.normal(size=(6, 4)))
    labels = rng.integers(0, 3, size=6)

    def build_loss():
        hidden = T.tanh(T.add(T.matmul(x, w1), b1))
        logits = T.add(T.matmul(hidden, w2), b2)
        return T.softmax_cross_entropy(logits, labels)

    assert_grads_match(build_loss, {"w1": w1, "b1": b1, "w2": w2, "b2": b2})


def test_shared_subexpression_accumulates_once_per_use():
    # z = (x*x) + (x*x) = 2 x^2 -> dz/dx = 4x
    x = Tensor([3.0], requires_grad=True)
    y = T.mul(x, x)
    T.backward(T.sum_all(T.add(y, y)))
    assert np.array_equal(x.grad, [12.0])


def test_tape_records_in_topological_order():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    T.clear_tape()
    out = T.relu(T.add(T.matmul(x, x), x))
    entries = T.tape_entries()
    seen = {id(x)}
    for entry in entries:
        for inp in entry.inputs:
            assert id(inp) in seen or not inp.requires_grad
        seen.add(id(entry.output))
    assert entries[-1].output is out
    T.clear_tape()


def test_no_grad_blocks_recording():
    x = Tensor(np.ones(3), requires_grad=True)
    T.clear_tape()
    with T.no_grad():
        out = T.relu(x)
    assert not out.requires_grad
    assert T.tape_entries() == []


def test_no_grad_leakage_to_frozen_tensors():
    frozen = Tensor(np.ones((3, 3)), requires_grad=False)
    free = Tensor(np.ones((3, 3)), requires_grad=True)
    T.backward(T.sum_all(T.matmul(frozen, free)))
    assert frozen.grad is None
    assert free.grad is not None


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(8, 8)), requires_grad=True)
        y = T.softmax(T.matmul(T.gelu(x), x))
        loss = T.sum_all(y)
        T.backward(loss)
        return y.data.copy(), x.grad.copy()

    out1, grad1 = run()
    out2, grad2 = run()
    assert out1.tobytes() == out2.tobytes()
    assert grad1.tobytes() == grad2.tobytes()


def test_nan_inputs_fail_fast():
    huge = Tensor([1e308])
    with pytest.raises(NumericError, match="mul"):
        T.mul(huge, huge)


# ---------------------------------------------------------------------------
# per-op gradient correctness (randomized, finite-difference oracle)


def _check_unary(op, shape=(3, 4), scale=1.0, seed=0):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)
    weights = rng.normal(size=shape if op is not T.softmax else shape)

    def build_loss():
        return T.sum_all(T.mul(op(x), Tensor(weights)))

    assert_grads_match(build_loss, {"x": x})


@pytest.mark.parametrize("op", [T.relu, T.gelu, T.tanh, T.softmax])
def test_unary_op_gradients(op):
    _check_unary(op)


def test_add_mul_broadcast_gradients(rng):
    a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=5), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 5)))

    def build_loss():
        return T.sum_all(T.mul(T.add(T.mul(a, b), b), w))

    assert_grads_match(build_loss, {"a": a, "b": b})


def test_matmul_bmm_gradients(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    c = Tensor(rng.normal(size=(1, 2, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(1, 2, 2)))

    def build_loss():
        prod = T.matmul(a, b)  # (3, 2)
        stacked = T.reshape(prod, (1, 3, 2))
        return T.sum_all(T.mul(T.bmm(c, stacked), w))

    assert_grads_match(build_loss, {"a": a, "b": b, "c": c})


def test_shape_op_gradients(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 6)))

    def build_loss():
        moved = T.transpose(x, (1, 0, 2))
        flat = T.reshape(moved, (6, 4))
        picked = T.take_rows(flat, np.array([0, 2, 2, 5]))
        return T.sum_all(T.mul(T.matmul(picked, w), Tensor(np.ones((4, 6)))))

    assert_grads_match(build_loss, {"x": x})


def test_layer_norm_gradients(rng):
    x = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
    gamma = Tensor(rng.normal(loc=1.0, scale=0.2, size=6), requires_grad=True)
    beta = Tensor(rng.normal(scale=0.2, size=6), requires_grad=True)
    w = Tensor(rng.normal(size=(5, 6)))

    def build_loss():
        return T.sum_all(T.mul(T.layer_norm(x, gamma, beta, eps=1e-8), w))

    assert_grads_match(build_loss, {"x": x, "gamma": gamma, "beta": beta})


def test_take_rows_repeated_indices_accumulate():
    x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    T.backward(T.sum_all(T.take_rows(x, np.array([1, 1, 1]))))
    assert np.array_equal(x.grad, [[0.0, 0.0], [3.0, 3.0], [0.0, 0.0]])


def test_take_rows_rejects_out_of_range():
    with pytest.raises(InputError, match="index out of range"):
        T.take_rows(Tensor(np.zeros((3, 2))), np.array([3]))


def test_finite_difference_helper_is_sane():
    # the oracle itself on f(x) = sum(x^2): grad = 2x
    x = Tensor([1.0, -2.0, 0.5])

    def f():
        return float((x.data**2).sum())

    np.testing.assert_allclose(finite_difference_grad(f, x), 2.0 * x.data, atol=1e-8)
    assert relative_error(None, np.zeros(3)) == 0.0
