"""AdamW with decoupled weight decay, global-norm clipping, and the
warmup/inverse-sqrt learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NumericalError, ValidationError


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to base_lr, then inverse-sqrt decay.

    The canonical schedule carries a model-width factor; here it is normalized
    so the peak is exactly base_lr at the warmup step, and model_dim is kept
    only as a record of the width the run used.
    """

    base_lr: float
    warmup_steps: int
    model_dim: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValidationError(f"base_lr must be positive, got {self.base_lr}")
        if self.warmup_steps < 1:
            raise ValidationError(f"warmup_steps must be >= 1, got {self.warmup_steps}")

    def lr_at(self, step: int) -> float:
        if step < 1:
            raise ValidationError(f"schedule step must be >= 1, got {step}")
        w = self.warmup_steps
        return self.base_lr * min(step / w, float(np.sqrt(w / step)))


def lr_at(schedule: LrSchedule, step: int) -> float:
    return schedule.lr_at(step)


def global_grad_norm(store) -> float:
    """L2 norm over all gradients jointly; parameters without a gradient
    contribute zero."""
    total = 0.0
    for name in store.names():
        g = store.entry(name).value.grad
        if g is not None:
            total += float(np.sum(g.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_gradients(store, max_norm: float) -> float:
    """Scale all gradients jointly so their global norm is at most max_norm.

    Returns the pre-clip norm. Raises on a non-finite norm.
    """
    if max_norm <= 0:
        raise ValidationError(f"max_norm must be positive, got {max_norm}")
    norm = global_grad_norm(store)
    if not np.isfinite(norm):
        raise NumericalError(f"gradient norm is not finite: {norm}")
    if norm > max_norm:
        scale = max_norm / norm
        for name in store.names():
            g = store.entry(name).value.grad
            if g is not None:
                g *= np.asarray(scale, dtype=g.dtype)
    return norm


def adamw_step(store, lr: float, beta1: float = 0.9, beta2: float = 0.95,
               eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """One decoupled-weight-decay Adam update over every parameter.

    Parameters whose gradient slot is empty are treated as zero-gradient
    (their moments still decay and weight decay still applies). Gradients are
    cleared afterwards.
    """
    if lr <= 0:
        raise ValidationError(f"lr must be positive, got {lr}")
    for name in store.names():
        entry = store.entry(name)
        p = entry.value.data
        g = entry.value.grad
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ValidationError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        entry.step += 1
        t = entry.step
        entry.m = beta1 * entry.m + (1.0 - beta1) * g
        entry.v = beta2 * entry.v + (1.0 - beta2) * (g * g)
        mhat = entry.m / (1.0 - beta1 ** t)
        vhat = entry.v / (1.0 - beta2 ** t)
        update = mhat / (np.sqrt(vhat) + eps) + weight_decay * p
        p -= np.asarray(lr, dtype=p.dtype) * update.astype(p.dtype)
        if not np.all(np.isfinite(p)):
            raise NumericalError(f"non-finite values in parameter {name} after update")
        entry.value.grad = None
