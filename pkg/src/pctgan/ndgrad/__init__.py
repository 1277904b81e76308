from .tensor import (
    Tensor,
    add,
    backward,
    broadcast_to,
    col2im,
    concat,
    div,
    enable_grad,
    exp,
    getitem,
    grad,
    graph_ops,
    im2col,
    is_grad_enabled,
    leaky_relu,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    reshape,
    scatter_add,
    sigmoid,
    sqrt,
    stack,
    sub,
    sum_to,
    tanh,
    transpose,
    tsum,
)
from .functional import (
    BatchNormStats,
    DegenerateInputError,
    SpectralState,
    StateError,
    activation,
    batch_norm2d,
    conv2d,
    conv_transpose2d,
    gradient_penalty,
    input_gradient_norm,
    linear,
    power_iteration,
    spectral_normalize,
)
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, Linear, Module, Parameter, global_sum_pool
from .optim import Adam, AdamState, adam_step
