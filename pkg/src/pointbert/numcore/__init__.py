"""Tensor algebra, reverse-mode autodiff, optimizer and schedules."""

from .functional import cross_entropy_logits, dropout, gather_rows, l2_normalize, layernorm, log_softmax, softmax
from .module import LayerNorm, Linear, Module, parameter
from .optim import AdamW, LrSchedule, OptimState, adamw_step, lr_at
from .tensor import (
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    div,
    exp,
    gelu,
    getitem,
    leaky_relu,
    log,
    matmul,
    mul,
    neg,
    no_grad,
    reduce,
    relu,
    reshape,
    scale,
    sqrt,
    stack,
    sub,
    swapaxes,
    tanh,
    tensor_elementwise,
    transpose,
    where,
)


def backward(loss):
    loss.backward()
