"""Finite-difference verification of backward passes.

Checks run in float64: the forward code is dtype-generic, so the exact
production code path is exercised at a precision where central
differences are trustworthy.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_gradient(
    f: Callable[..., float], arrays: Sequence[np.ndarray], index: int, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of ``f`` w.r.t. ``arrays[index]``.

    ``f`` receives plain float64 arrays and must return a python float.
    """
    arrays = [np.asarray(a, dtype=np.float64).copy() for a in arrays]
    target = arrays[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = target[idx]
        target[idx] = orig + eps
        f_plus = f(*arrays)
        target[idx] = orig - eps
        f_minus = f(*arrays)
        target[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * eps)
        it.iternext()
    return grad


def check_gradients(
    f: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` maps tensors to a scalar tensor.  Returns the worst relative
    error over all inputs and raises ``AssertionError`` when it exceeds
    ``tol``.
    """
    leaves = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = f(*leaves)
    if out.data.size != 1:
        raise ValueError("gradcheck target must return a scalar tensor")
    out.backward()

    def scalar_f(*plain: np.ndarray) -> float:
        res = f(*[Tensor(p) for p in plain])
        return float(res.data.reshape(()))

    worst = 0.0
    for i, leaf in enumerate(leaves):
        numeric = numeric_gradient(scalar_f, [l.data for l in leaves], i, eps=eps)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(numeric)
        scale = max(float(np.abs(numeric).max()), float(np.abs(analytic).max()), 1e-8)
        err = float(np.abs(analytic - numeric).max()) / scale
        worst = max(worst, err)
        if err > tol:
            raise AssertionError(
                f"gradient mismatch on input {i}: relative error {err:.3e} "
                f"exceeds {tol:.1e}"
            )
    return worst
