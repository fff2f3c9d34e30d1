from .kernels import bmm, reference_matmul
from .optim import Parameter, adamw_step, clip_grad_norm, global_grad_norm
from .tensor import (
    Node,
    Tape,
    Value,
    active_tape,
    add,
    backward,
    concat,
    cross_entropy,
    elementwise,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    max_reduce,
    mean,
    mul,
    reshape,
    softmax,
    sum_all,
    take,
    transpose,
)

__all__ = [
    "Node", "Parameter", "Tape", "Value", "active_tape", "adamw_step", "add", "backward",
    "bmm", "clip_grad_norm", "concat", "cross_entropy", "elementwise", "embedding_lookup",
    "gelu", "global_grad_norm", "layer_norm", "matmul", "max_reduce", "mean", "mul",
    "reference_matmul", "reshape", "softmax", "sum_all", "take", "transpose",
]
