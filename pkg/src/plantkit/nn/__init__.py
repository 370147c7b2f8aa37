"""Minimal reverse-mode autodiff core: tensors, layers, losses, AdamW."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .layers import (
    ConfigError,
    dropout,
    gelu,
    gru_cell,
    layer_norm,
    linear,
    multi_head_self_attention,
    trunc_normal,
)
from .losses import cross_entropy, l1_loss
from .optim import ParamStore, adamw_step, clip_grad_norm, global_grad_norm
from .tensor import ShapeError, Tensor, concat, log_softmax, softmax, stack

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ParamStore",
    "ShapeError",
    "Tensor",
    "adamw_step",
    "clip_grad_norm",
    "concat",
    "cross_entropy",
    "dropout",
    "gelu",
    "global_grad_norm",
    "gru_cell",
    "l1_loss",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "log_softmax",
    "multi_head_self_attention",
    "save_checkpoint",
    "softmax",
    "stack",
    "trunc_normal",
]
