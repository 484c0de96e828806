"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps an ``ndarray`` plus an optional record of the operation
that produced it.  Operations build a DAG; ``Tensor.backward()`` walks it
once in reverse topological order, accumulates gradients into leaf
tensors, and then frees the graph.  The engine is single-assignment and
eager: there is no graph compilation, every op computes immediately.

Float32 is the working precision for models and data; float64 inputs are
preserved so finite-difference gradient checks can run the identical code
path at high precision.  Integer or boolean inputs are converted to
float32.

Graphs are confined to the thread that built them.  Inference from
multiple threads is supported by wrapping calls in ``no_grad()``, which
is tracked per-thread.
"""

from __future__ import annotations

import threading

import numpy as np

_FLOAT_TYPES = (np.float32, np.float64)

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording on this thread."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class _Node:
    """Backward record: parents plus the vector-Jacobian product."""

    __slots__ = ("parents", "vjp", "name")

    def __init__(self, parents, vjp, name):
        self.parents = parents
        self.vjp = vjp
        self.name = name


def _coerce(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype.type not in _FLOAT_TYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self._consumed = False

    # -- basic array-ish surface ---------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """The underlying array (no copy); do not mutate while on a tape."""
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def is_leaf(self) -> bool:
        return self._node is None

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("grad")
        if self._node is not None:
            flags.append(self._node.name)
        tag = f" [{', '.join(flags)}]" if flags else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        ``self`` must be a scalar unless an explicit output gradient is
        given.  The graph below this tensor is released afterwards, so a
        second call without rebuilding the forward pass raises.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if self._consumed:
            raise RuntimeError(
                "backward graph already consumed; rerun the forward pass "
                "before differentiating again"
            )
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError(
                    f"backward() without an explicit gradient needs a scalar, "
                    f"got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise RuntimeError(
                    f"gradient shape {grad.shape} does not match output "
                    f"shape {self.data.shape}"
                )

        order = self._toposort()
        grads: dict[int, np.ndarray] = {id(self): grad}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t._node
            if node is None:
                t.grad = g if t.grad is None else t.grad + g
                continue
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # Release op records so saved activations can be collected.
        for t in order:
            if t._node is not None:
                t._node = None
                t._consumed = True

    def _toposort(self) -> list["Tensor"]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, done = stack.pop()
            if done:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in t._node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return order


def make_result(data: np.ndarray, parents: tuple, vjp, name: str = "") -> Tensor:
    """Wrap an op result, recording the backward rule when grad is on."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), vjp, name)
    else:
        out.requires_grad = False
        out._node = None
    return out


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    """Coerce a scalar/array into a constant tensor, matching dtype."""
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))
