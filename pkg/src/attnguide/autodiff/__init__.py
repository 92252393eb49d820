"""Minimal dense tensors with reverse-mode differentiation."""
from .ops import (
    add, conv2d_fixed, div, embedding, expand, gelu, getitem, layer_norm, linear, matmul, mean,
    mul, neg, reduce_max, reshape, scale, softmax_rows, stack, sub, sum, transpose,
)
from .serialize import load_array, load_tensor, save_array, save_tensor
from .tensor import (
    Node, Tape, Tensor, backward, default_dtype, get_default_dtype, is_grad_enabled, no_grad,
    set_default_dtype,
)

__all__ = [
    "Node", "Tape", "Tensor", "backward", "default_dtype", "get_default_dtype", "is_grad_enabled",
    "no_grad", "set_default_dtype",
    "add", "conv2d_fixed", "div", "embedding", "expand", "gelu", "getitem", "layer_norm", "linear",
    "matmul", "mean", "mul", "neg", "reduce_max", "reshape", "scale", "softmax_rows", "stack", "sub",
    "sum", "transpose",
    "load_array", "load_tensor", "save_array", "save_tensor",
]
