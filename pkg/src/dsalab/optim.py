"""Optimizers, global-norm clipping and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor


class SGD:
    """SGD with heavy-ball momentum: ``v = mu*v + g; p -= lr*v``."""

    kind = "sgd-momentum"

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-2, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.buffers = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, buf in zip(self.params, self.buffers):
            if p.grad is None:
                continue
            buf *= self.momentum
            buf += p.grad
            p.data -= self.lr * buf
        self.steps += 1


class Adam:
    """Adam with bias correction.

    :meth:`direction` returns the update direction for raw arrays, which is
    what the patch attack uses (it ascends, so it adds ``lr * direction``).
    """

    kind = "adam"

    def __init__(self, params: Sequence[Tensor] = (), lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: list[np.ndarray] | None = [np.zeros_like(p.data) for p in self.params] or None
        self.v: list[np.ndarray] | None = [np.zeros_like(p.data) for p in self.params] or None
        self.steps = 0

    def direction(self, grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        if self.m is None:
            self.m = [np.zeros_like(g) for g in grads]
            self.v = [np.zeros_like(g) for g in grads]
        if len(grads) != len(self.m) or any(g.shape != m.shape for g, m in zip(grads, self.m)):
            raise ValueError("gradient shapes do not match the Adam moment buffers")
        self.steps += 1
        c1 = 1.0 - self.beta1 ** self.steps
        c2 = 1.0 - self.beta2 ** self.steps
        out = []
        for g, m, v in zip(grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            out.append((m / c1) / (np.sqrt(v / c2) + self.eps))
        return out

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        for p, d in zip(self.params, self.direction(grads)):
            p.data -= self.lr * d


def clip_global_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise ValueError(f"parameters {missing} have no gradient")
    total = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params))
    if total > max_norm:
        factor = max_norm / total
        for p in params:
            p.grad = p.grad * factor
    return total


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    step = min(max(step, 0), total_steps)
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    progress = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
