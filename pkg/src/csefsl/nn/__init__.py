"""Minimal feed-forward network kernel in double precision."""

from .core import (
    ForwardCache,
    add_grads,
    backward,
    clip_by_global_norm,
    forward,
    global_norm,
    grad_check,
    loss_and_grads,
    max_relative_error,
    numeric_grads,
    predict,
    sgd_step,
    softmax_xent,
)
from .layers import (
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    LayerSpec,
    LocalResponseNorm,
    MaxPool2D,
    ReLU,
    copy_params,
    flatten_params,
    infer_shapes,
    init_params,
    output_shape,
    param_count,
    unflatten_params,
    zeros_like_params,
)
from .schedule import LrSchedule

__all__ = [
    "Conv2D", "Dense", "Dropout", "Flatten", "ForwardCache", "LayerSpec", "LocalResponseNorm",
    "LrSchedule", "MaxPool2D", "ReLU", "add_grads", "backward", "clip_by_global_norm",
    "copy_params", "flatten_params", "forward", "global_norm", "grad_check", "infer_shapes",
    "init_params", "loss_and_grads", "max_relative_error", "numeric_grads", "output_shape",
    "param_count", "predict", "sgd_step", "softmax_xent", "unflatten_params", "zeros_like_params",
]
