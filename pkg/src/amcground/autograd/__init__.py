"""Reverse-mode automatic differentiation with second-order support."""
from .nn import (
    bilinear_resize,
    cross_entropy,
    gelu,
    interpolation_matrix,
    key_padding_mask,
    l2_normalize,
    layer_norm,
    linear,
    log_softmax,
    one_hot,
    softmax,
)
from .tape import GradientTape, backward, grad
from .tensor import (
    DEFAULT_DTYPE,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    div,
    elementwise,
    exp,
    getitem,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    ones,
    power,
    reduce,
    relu,
    reshape,
    scatter,
    set_grad_enabled,
    sub,
    sum_to,
    tanh,
    tensor,
    tmax,
    transpose,
    tsum,
    zeros,
)

