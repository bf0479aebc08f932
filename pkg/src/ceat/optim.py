"""AdamW with per-step cosine learning-rate decay."""
from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


class AdamW:
    """Decoupled weight decay; decay is applied to matrices only (not biases, norms or tokens)."""

    def __init__(self, params: dict[str, Tensor], lr: float, total_steps: int,
                 weight_decay: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.base_lr = lr
        self.total_steps = total_steps
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[Tensor, np.ndarray]) -> float:
        lr = cosine_lr(self.base_lr, self.step_count, self.total_steps)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.b1**t
        c2 = 1.0 - self.b2**t
        for name, p in self.params.items():
            g = grads.get(p)
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr * update).astype(p.data.dtype)
        return lr
