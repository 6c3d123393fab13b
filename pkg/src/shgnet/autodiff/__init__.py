"""Minimal dense-tensor engine with reverse-mode gradients."""

from .ops import (
    RunningStats,
    batchnorm2d,
    conv2d,
    dropout,
    global_avg_pool,
    linear,
    log_softmax,
    maxpool2d,
    one_hot,
    relu,
    softmax,
    weighted_smoothed_ce,
)
from .optim import AdamW, OptimizerState, adamw_step, adamw_update, clip_global_norm
from .tensor import DEFAULT_DTYPE, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "AdamW", "DEFAULT_DTYPE", "OptimizerState", "RunningStats", "Tensor", "adamw_step",
    "adamw_update", "backward", "batchnorm2d", "clip_global_norm", "conv2d", "dropout",
    "global_avg_pool", "is_grad_enabled", "linear", "log_softmax", "maxpool2d", "no_grad",
    "one_hot", "relu", "softmax", "weighted_smoothed_ce",
]
