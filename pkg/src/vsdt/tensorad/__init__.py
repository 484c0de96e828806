"""Minimal reverse-mode autodiff engine on numpy, tailored to the
volumetric convolutional and recurrent models in this package."""

from .tensor import Tensor, as_tensor, is_grad_enabled, make_result, no_grad
from .ops import (
    absolute,
    add,
    concat,
    divide,
    exp,
    getitem,
    matmul,
    mean,
    multiply,
    negative,
    pad_spatial,
    relu,
    reshape,
    sigmoid,
    sqrt,
    square,
    subtract,
    sum,
    take,
    tanh,
    transpose,
)
from .conv import (
    conv3d,
    conv3d_param_count,
    maxpool3d,
    pooled_dims,
    upsample3d_nearest,
)
from .rnn import GATE_ORDER, init_lstm_params, lstm_layer, lstm_param_count
from .gradcheck import check_gradients, numeric_gradient

__all__ = [
    "Tensor",
    "as_tensor",
    "is_grad_enabled",
    "make_result",
    "no_grad",
    "absolute",
    "add",
    "concat",
    "divide",
    "exp",
    "getitem",
    "matmul",
    "mean",
    "multiply",
    "negative",
    "pad_spatial",
    "relu",
    "reshape",
    "sigmoid",
    "sqrt",
    "square",
    "subtract",
    "sum",
    "take",
    "tanh",
    "transpose",
    "conv3d",
    "conv3d_param_count",
    "maxpool3d",
    "pooled_dims",
    "upsample3d_nearest",
    "GATE_ORDER",
    "init_lstm_params",
    "lstm_layer",
    "lstm_param_count",
    "check_gradients",
    "numeric_gradient",
]
