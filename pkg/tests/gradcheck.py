"""Independent finite-difference oracle for gradient checks.

Central differences with h=1e-5 in double precision; kept free of any tape
machinery so it stays an independent route against the autodiff output.
"""

import numpy as np

from adapterlab import tensor as T
from adapterlab.tensor import Tensor

FD_STEP = 1e-5
REL_TOL = 1e-4


def finite_difference_grad(loss_fn, tensor: Tensor, h: float = FD_STEP) -> np.ndarray:
    """d loss / d tensor, entry by entry, via central differences.

    ``loss_fn`` recomputes the scalar loss from current tensor contents.
    """
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        f_plus = loss_fn()
        flat[i] = original - h
        f_minus = loss_fn()
        flat[i] = original
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(autodiff: np.ndarray | None, reference: np.ndarray) -> float:
    """max over entries of |a - r| / max(1, |r|); missing autodiff grads are zero."""
    a = np.zeros_like(reference) if autodiff is None else autodiff
    return float(np.max(np.abs(a - reference) / np.maximum(1.0, np.abs(reference))))


def assert_grads_match(build_loss, tensors: dict[str, Tensor], tol: float = REL_TOL) -> None:
    """Compare tape gradients against the finite-difference oracle.

    ``build_loss`` constructs the scalar loss Tensor from current contents;
    it is re-run under no_grad for every probe of the oracle.
    """
    T.zero_grads(tensors.values())
    T.clear_tape()
    loss = build_loss()
    T.backward(loss)
    grads = {name: t.grad for name, t in tensors.items()}

    def loss_value() -> float:
        with T.no_grad():
            return build_loss().item()

    for name, t in tensors.items():
        reference = finite_difference_grad(loss_value, t)
        err = relative_error(grads[name], reference)
        assert err < tol, f"gradient mismatch for {name}: relative error {err:.3e}"
