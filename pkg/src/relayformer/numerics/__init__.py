from relayformer.numerics.ops import gelu, layer_norm, linear, sigmoid, softmax_rows
from relayformer.numerics.optim import CosineSchedule, OptimState, adamw_step, zero_grad
from relayformer.numerics.tensor import (
    Tensor,
    concat,
    count_macs,
    is_grad_enabled,
    matmul,
    no_grad,
    stack,
    tensor,
)

__all__ = [
    "CosineSchedule",
    "OptimState",
    "Tensor",
    "adamw_step",
    "concat",
    "count_macs",
    "gelu",
    "is_grad_enabled",
    "layer_norm",
    "linear",
    "matmul",
    "no_grad",
    "sigmoid",
    "softmax_rows",
    "stack",
    "tensor",
    "zero_grad",
]
