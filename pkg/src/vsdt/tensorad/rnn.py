"""LSTM layers assembled from the differentiable primitives.

The recurrence is the classic formulation with input, forget, cell and
output gates; a bidirectional layer runs an independent reverse-time
scan and concatenates per-step outputs feature-wise.  The layer returns
both the per-step output sequence and a sequence summary: the final
hidden state of each direction (for the reverse direction that is the
state after it has consumed the whole sequence), which is what a
sequence-to-one head should read.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor

# Gate rows are packed (input, forget, cell, output) along the 4H axis.
GATE_ORDER = ("input", "forget", "cell", "output")


def lstm_param_count(input_size: int, hidden_size: int, bidirectional: bool = True) -> int:
    """Trainable parameter count: 4*(H*(D+H) + H) per direction."""
    per_dir = 4 * (hidden_size * (input_size + hidden_size) + hidden_size)
    return per_dir * (2 if bidirectional else 1)


def init_lstm_params(
    input_size: int,
    hidden_size: int,
    bidirectional: bool = True,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
    forget_bias: float = 1.0,
) -> dict[str, np.ndarray]:
    """Uniform fan-in initialisation; forget-gate biases start positive."""
    rng = rng if rng is not None else np.random.default_rng()
    h = hidden_size

    def one_direction(suffix: str) -> dict[str, np.ndarray]:
        bound_ih = 1.0 / np.sqrt(input_size)
        bound_hh = 1.0 / np.sqrt(h)
        b = np.zeros(4 * h, dtype=dtype)
        b[h : 2 * h] = forget_bias
        return {
            f"w_ih{suffix}": rng.uniform(-bound_ih, bound_ih, (input_size, 4 * h)).astype(dtype),
            f"w_hh{suffix}": rng.uniform(-bound_hh, bound_hh, (h, 4 * h)).astype(dtype),
            f"b{suffix}": b,
        }

    params = one_direction("")
    if bidirectional:
        params.update(one_direction("_rev"))
    return params


def _scan(
    xs: list[Tensor], w_ih: Tensor, w_hh: Tensor, b: Tensor, hidden: int, dtype
) -> tuple[list[Tensor], Tensor]:
    batch = xs[0].data.shape[0]
    h = Tensor(np.zeros((batch, hidden), dtype=dtype))
    c = Tensor(np.zeros((batch, hidden), dtype=dtype))
    outs: list[Tensor] = []
    for x in xs:
        z = ops.add(ops.add(ops.matmul(x, w_ih), ops.matmul(h, w_hh)), b)
        i = ops.sigmoid(z[:, :hidden])
        f = ops.sigmoid(z[:, hidden : 2 * hidden])
        g = ops.tanh(z[:, 2 * hidden : 3 * hidden])
        o = ops.sigmoid(z[:, 3 * hidden :])
        c = ops.add(ops.multiply(f, c), ops.multiply(i, g))
        h = ops.multiply(o, ops.tanh(c))
        outs.append(h)
    return outs, h


def lstm_layer(
    inputs: list[Tensor],
    params: dict[str, Tensor],
    hidden_size: int,
    bidirectional: bool = True,
) -> tuple[list[Tensor], Tensor]:
    """Run an LSTM over a time-major list of ``(batch, features)`` tensors.

    Returns ``(outputs, summary)``: per-step outputs (features doubled
    when bidirectional) and the concatenated final hidden states.
    """
    if not inputs:
        raise ValueError("lstm_layer needs a non-empty input sequence")
    for t in inputs:
        if t.data.ndim != 2:
            raise ValueError(
                f"lstm inputs must be (batch, features), got shape {t.data.shape}"
            )
    dtype = inputs[0].data.dtype
    fwd_out, fwd_last = _scan(
        inputs, params["w_ih"], params["w_hh"], params["b"], hidden_size, dtype
    )
    if not bidirectional:
        return fwd_out, fwd_last
    rev_out, rev_last = _scan(
        inputs[::-1],
        params["w_ih_rev"],
        params["w_hh_rev"],
        params["b_rev"],
        hidden_size,
        dtype,
    )
    rev_out = rev_out[::-1]
    outs = [ops.concat([f, r], axis=1) for f, r in zip(fwd_out, rev_out)]
    summary = ops.concat([fwd_last, rev_last], axis=1)
    return outs, summary
