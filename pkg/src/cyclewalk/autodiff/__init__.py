from .tensor import Tensor, as_tensor, grad_enabled, no_grad
from .ops import (
    PADDING_MODES,
    add,
    bilinear_sample,
    concat,
    conv2d,
    conv_output_size,
    div,
    exp,
    grid_sample_bilinear,
    index,
    instance_norm,
    l2_normalize,
    l2_normalize_nodes,
    log,
    matmul,
    mean,
    mul,
    pad2d,
    relu,
    reshape,
    softmax_rows,
    stack,
    sub,
    transpose,
)
from .ops import sum as reduce_sum
from .serialize import FormatError

__all__ = [
    "Tensor", "as_tensor", "grad_enabled", "no_grad", "PADDING_MODES", "add",
    "bilinear_sample", "concat", "conv2d", "conv_output_size", "div", "exp",
    "grid_sample_bilinear", "index", "instance_norm", "l2_normalize",
    "l2_normalize_nodes", "log", "matmul", "mean", "mul", "pad2d", "relu",
    "reshape", "softmax_rows", "stack", "sub", "transpose", "reduce_sum",
    "FormatError",
]
