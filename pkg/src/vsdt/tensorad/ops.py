"""Differentiable primitive operations.

Every function takes tensors (scalars and arrays are promoted to
constants), computes the forward value eagerly with numpy, and registers
a vector-Jacobian product closure.  Broadcasting follows numpy rules;
gradients are summed back down to each operand's shape.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, make_result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------------
# arithmetic
# ----------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return make_result(data, (a, b), vjp, "add")


def subtract(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return make_result(data, (a, b), vjp, "sub")


def multiply(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    data = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return make_result(data, (a, b), vjp, "mul")


def divide(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    data = a.data / b.data

    def vjp(g):
        ga = g / b.data
        gb = -g * data / b.data
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return make_result(data, (a, b), vjp, "div")


def negative(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return make_result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_result(a.data * a.data, (a,), lambda g: (g * (2.0 * a.data),), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def vjp(g):
        return (g / (2.0 * data),)

    return make_result(data, (a,), vjp, "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    return make_result(data, (a,), lambda g: (g * data,), "exp")


# ----------------------------------------------------------------------
# nonlinearities
# ----------------------------------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)
    return make_result(data, (a,), lambda g: (g * (1.0 - data * data),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # Overflow-free logistic via tanh.
    data = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return make_result(data, (a,), lambda g: (g * data * (1.0 - data),), "sigmoid")


# ----------------------------------------------------------------------
# shape manipulation
# ----------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    data = a.data.reshape(shape)
    return make_result(data, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = a.data.transpose(axes)
    return make_result(data, (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of an empty sequence")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(data, tuple(ts), vjp, "concat")


def getitem(a, key) -> Tensor:
    """Basic indexing (ints and slices) with gradient scatter."""
    a = as_tensor(a)
    data = a.data[key]

    def vjp(g):
        out = np.zeros_like(a.data)
        out[key] = g
        return (out,)

    return make_result(data, (a,), vjp, "getitem")


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along one axis with an integer index array (any shape)."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    data = np.take(a.data, idx, axis=axis)
    collapsed = a.data.shape[:axis] + (idx.size,) + a.data.shape[axis + 1 :]
    flat_idx = idx.reshape(-1)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(
            np.moveaxis(out, axis, 0),
            flat_idx,
            np.moveaxis(g.reshape(collapsed), axis, 0),
        )
        return (out,)

    return make_result(data, (a,), vjp, "take")


def pad_spatial(a, pads) -> Tensor:
    """Zero-pad the trailing three axes; ``pads`` is three (before, after) pairs."""
    a = as_tensor(a)
    if a.data.ndim < 3:
        raise ValueError("pad_spatial needs at least three axes")
    pads = tuple((int(b), int(e)) for b, e in pads)
    if len(pads) != 3 or any(b < 0 or e < 0 for b, e in pads):
        raise ValueError(f"pads must be three non-negative pairs, got {pads}")
    full = ((0, 0),) * (a.data.ndim - 3) + pads
    data = np.pad(a.data, full)
    key = tuple(
        slice(b, data.shape[i] - e) for i, (b, e) in enumerate(full)
    )

    def vjp(g):
        return (g[key],)

    return make_result(data, (a,), vjp, "pad_spatial")


# ----------------------------------------------------------------------
# reductions and linear algebra
# ----------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - numpy-style name
    a = as_tensor(a)
    axis = _norm_axis(axis, a.data.ndim)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(data, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axis = _norm_axis(axis, a.data.ndim)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    count = a.data.size if axis is None else int(np.prod([shape[i] for i in axis]))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return make_result(data, (a,), vjp, "mean")


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires operands with at least two axes")
    data = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return make_result(data, (a, b), vjp, "matmul")


# ----------------------------------------------------------------------
# operator wiring
# ----------------------------------------------------------------------

Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(as_tensor(other, like=self), self)
Tensor.__sub__ = subtract
Tensor.__rsub__ = lambda self, other: subtract(as_tensor(other, like=self), self)
Tensor.__mul__ = multiply
Tensor.__rmul__ = lambda self, other: multiply(as_tensor(other, like=self), self)
Tensor.__truediv__ = divide
Tensor.__rtruediv__ = lambda self, other: divide(as_tensor(other, like=self), self)
Tensor.__neg__ = negative
Tensor.__matmul__ = matmul
Tensor.__getitem__ = getitem
Tensor.reshape = lambda self, shape: reshape(self, shape)
Tensor.transpose = lambda self, axes: transpose(self, axes)
Tensor.sum = lambda self, axis=None, keepdims=False: sum(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: mean(self, axis, keepdims)
