"""Momentum SGD with a single stepped learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import ShapeMismatchError, Tensor

__all__ = ["OptimState", "sgd_step"]


@dataclass
class OptimState:
    """Hyperparameters plus one velocity buffer per parameter name.

    The learning rate is `learning_rate` until `decay_epoch`, then
    `learning_rate * decay_factor` from that epoch on.
    """

    learning_rate: float = 2e-4
    momentum: float = 0.9
    decay_epoch: int = 300
    decay_factor: float = 0.1
    velocities: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.decay_epoch < 0:
            raise ValueError(f"decay_epoch must be non-negative, got {self.decay_epoch}")
        if not 0 < self.decay_factor <= 1:
            raise ValueError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")

    def effective_lr(self, epoch: int) -> float:
        if epoch >= self.decay_epoch:
            return self.learning_rate * self.decay_factor
        return self.learning_rate


def sgd_step(params: Mapping[str, Tensor], state: OptimState, epoch: int) -> float:
    """Apply one momentum-SGD update in place; returns the rate used.

    v <- momentum * v + grad, then w <- w - lr(epoch) * v. Parameters whose
    grad is unset are treated as having a zero gradient, which still decays
    any existing velocity.
    """
    lr = state.effective_lr(epoch)
    for name, p in params.items():
        g = p.grad
        if g is not None and g.shape != p.data.shape:
            raise ShapeMismatchError(
                f"sgd_step: gradient shape {g.shape} does not match "
                f"parameter '{name}' shape {p.data.shape}"
            )
        v = state.velocities.get(name)
        if v is None:
            if g is None:
                continue
            v = np.zeros_like(p.data)
        v = state.momentum * v
        if g is not None:
            v = v + g.astype(p.data.dtype, copy=False)
        state.velocities[name] = v
        p.data -= np.asarray(lr, dtype=p.data.dtype) * v
    return lr
