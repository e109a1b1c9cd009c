"""A small numpy autograd engine: tensors, the network's operators, Adam."""

from . import functional
from .functional import (
    activation,
    batch_norm,
    conv3d,
    cross_entropy,
    global_max_pool,
    layer_norm,
    linear,
    relu,
    sigmoid,
    silu,
    softmax,
)
from .module import Module, Parameter
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, as_tensor, is_grad_enabled, matmul, no_grad

__all__ = [
    "Tensor", "as_tensor", "no_grad", "is_grad_enabled", "matmul",
    "Module", "Parameter", "Adam", "AdamState", "adam_step", "functional",
    "conv3d", "batch_norm", "layer_norm", "relu", "sigmoid", "silu", "activation",
    "global_max_pool", "linear", "softmax", "cross_entropy",
]
