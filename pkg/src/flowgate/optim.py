"""SGD with heavy-ball momentum and inverse-time learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def decayed_lr(base_lr: float, decay: float, iteration: int) -> float:
    """Learning rate used at update ``iteration`` (0-based)."""
    return base_lr / (1.0 + decay * iteration)


@dataclass
class SgdState:
    base_lr: float
    momentum: float = 0.9
    decay: float = 1e-6
    iteration: int = 0
    velocity: list = field(default_factory=list)

    @property
    def lr(self) -> float:
        return decayed_lr(self.base_lr, self.decay, self.iteration)


def sgd_momentum_step(params, grads, state: SgdState) -> float:
    """Apply one update in place and return the learning rate that was used.

        lr_t = base_lr / (1 + decay * t)
        v    = momentum * v - lr_t * g
        w    = w + v
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    if len(state.velocity) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    lr = state.lr
    for p, g, v in zip(params, grads, state.velocity):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        v *= state.momentum
        v -= np.asarray(lr * g, dtype=v.dtype)
        p.data += v
    state.iteration += 1
    return lr


class SGD:
    """Thin wrapper binding a parameter list to an :class:`SgdState`."""

    def __init__(self, params: list[Tensor], lr: float = 0.01, momentum: float = 0.9, decay: float = 1e-6):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        self.params = list(params)
        self.state = SgdState(base_lr=lr, momentum=momentum, decay=decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        return sgd_momentum_step(self.params, [p.grad for p in self.params], self.state)
