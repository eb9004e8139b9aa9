"""Dense tensors with reverse-mode gradients, AdamW, LR schedule, checkpoints."""

from .autodiff import (
    Tensor,
    active_dtype,
    add,
    backward,
    concat,
    constant,
    cross_entropy,
    dropout,
    embedding_lookup,
    gelu,
    layer_norm,
    log,
    masked_softmax,
    matmul,
    mean,
    mul,
    narrow,
    precision,
    relu,
    reshape,
    set_dtype,
    softmax,
    sqrt,
    sum_,
    tensor,
    transpose,
)
from .optim import LrSchedule, adamw_step, clip_gradients, global_grad_norm, lr_at
from .store import ParameterStore, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, check_gradients, finite_difference_grad

__all__ = [
    "Tensor", "tensor", "constant", "backward", "precision", "set_dtype", "active_dtype",
    "matmul", "add", "mul", "gelu", "relu", "softmax", "masked_softmax", "layer_norm",
    "embedding_lookup", "concat", "narrow", "reshape", "transpose", "sum_", "mean",
    "sqrt", "log", "dropout", "cross_entropy",
    "LrSchedule", "lr_at", "adamw_step", "clip_gradients", "global_grad_norm",
    "ParameterStore", "save_checkpoint", "load_checkpoint",
    "GradCheckReport", "check_gradients", "finite_difference_grad",
]
