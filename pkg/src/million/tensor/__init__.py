"""Minimal reverse-mode autodiff on float64 numpy arrays."""

from .core import (
    ContractError,
    DimensionError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    causal_mask,
    concat,
    current_tape,
    div,
    elementwise,
    exp,
    frozen_stop_gradients,
    getitem,
    is_grad_enabled,
    layer_norm,
    log,
    logsumexp,
    masked_attention,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    set_debug,
    sigmoid,
    softmax,
    softplus,
    split,
    square,
    stop_gradient,
    sub,
    swapaxes,
    take,
    tanh,
    transpose,
    tsum,
)
from .optim import Adam, AdamState, adam_step, clip_by_global_norm, global_norm
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint

__all__ = [name for name in dir() if not name.startswith("_")]
