"""Minimal differentiable-tensor core: ops, Adam, gradient checking."""

from .gradcheck import KinkProximityError, grad_check, relative_error
from .ops import (
    BatchNormState,
    batchnorm,
    concat,
    conv2d,
    dropout,
    exp,
    leaky_relu,
    linear,
    log,
    log_softmax,
    logsumexp,
    lstm_cell,
    maxpool2d,
    relu,
    sigmoid,
    softmax,
    stack,
    tanh,
)
from .optim import AdamState, adam_step, clip_by_global_norm, global_norm
from .tensor import Tensor, as_tensor, track_kinks

__all__ = [
    "AdamState",
    "BatchNormState",
    "KinkProximityError",
    "Tensor",
    "adam_step",
    "as_tensor",
    "batchnorm",
    "clip_by_global_norm",
    "concat",
    "conv2d",
    "dropout",
    "exp",
    "global_norm",
    "grad_check",
    "leaky_relu",
    "linear",
    "log",
    "log_softmax",
    "logsumexp",
    "lstm_cell",
    "maxpool2d",
    "relative_error",
    "relu",
    "sigmoid",
    "softmax",
    "stack",
    "tanh",
    "track_kinks",
]
