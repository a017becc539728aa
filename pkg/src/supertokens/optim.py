"""AdamW and the warmup + cosine learning-rate schedule."""
from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


class AdamW:
    """Adam with decoupled weight decay (PyTorch update order, per-parameter step counts).

    ``no_decay`` is a set of ``id(param)`` excluded from weight decay.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.05, no_decay=()):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.t = [0] * len(self.params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        b1, b2 = self.betas
        for i, (p, m, v) in enumerate(zip(self.params, self.m, self.v)):
            if p.grad is None or not p.requires_grad:
                continue
            self.t[i] += 1
            c1, c2 = 1 - b1 ** self.t[i], 1 - b2 ** self.t[i]
            g = p.grad
            if self.weight_decay and id(p) not in self.no_decay:
                p.data *= 1 - self.lr * self.weight_decay
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def lr_schedule(step: int, total_steps: int, warmup_steps: int, peak: float,
                start: float = 1e-6, final: float = 1e-6) -> float:
    """Linear warmup ``start -> peak``, then cosine down to ``final`` at ``total_steps - 1``."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if step < warmup_steps:
        return start + (peak - start) * step / warmup_steps
    span = max(total_steps - 1 - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return final + 0.5 * (peak - final) * (1 + math.cos(math.pi * progress))
