"""AdamW with decoupled weight decay, plus the cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor

__all__ = ["OptimState", "adamw_step", "cosine_anneal", "AdamW"]


@dataclass
class OptimState:
    """Per-parameter Adam moments and the shared hyperparameters.

    The moment buffers are keyed by position in the parameter list handed to
    :func:`adamw_step`, which must stay stable across steps.
    """

    beta1: float = 0.9
    beta2: float = 0.9
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def _ensure(self, params) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        if len(self.m) != len(params):
            raise ShapeError(
                f"optimizer state holds {len(self.m)} parameters, got {len(params)}"
            )


def adamw_step(params, grads, state: OptimState, lr: float):
    """One AdamW update, in place.

    Decoupled weight decay shrinks the parameter before the adaptive update;
    the moments use bias correction. Returns ``(params, state)``.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state._ensure(params)
    state.t += 1
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    c1 = np.float32(1.0 - state.beta1 ** state.t)
    c2 = np.float32(1.0 - state.beta2 ** state.t)
    lr32 = np.float32(lr)
    eps = np.float32(state.eps)
    wd = np.float32(state.weight_decay)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = p.grad if g is None else g
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        if wd != 0.0:
            p.data -= lr32 * wd * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= lr32 * mhat / (np.sqrt(vhat) + eps)
    return params, state


def cosine_anneal(lr0: float, lr_min: float, t: int, total: int) -> float:
    """lr(t) = lr_min + (lr0 - lr_min) * (1 + cos(pi * t / total)) / 2."""
    if not (lr0 >= lr_min > 0):
        raise ValueError(f"need lr0 >= lr_min > 0, got lr0={lr0}, lr_min={lr_min}")
    if t < 0 or t > total:
        raise ValueError(f"step {t} outside schedule of {total} steps")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total))


class AdamW:
    """Convenience wrapper binding a parameter list to an :class:`OptimState`."""

    def __init__(self, params, beta1=0.9, beta2=0.9, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        for p in self.params:
            if not isinstance(p, Tensor) or not p.requires_grad:
                raise ValueError("AdamW expects trainable Tensors")
        self.state = OptimState(beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)

    def step(self, lr: float) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0.0
