"""Optimizers and learning-rate schedules for probe training."""

from __future__ import annotations

import math

import numpy as np


class AdamW:
    """Adam with decoupled weight decay.

    Moments are kept in the parameter dtype; ``lr`` may be reassigned
    between steps by a schedule.
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= self.lr * update


def warmup_cosine_lr(epoch: int, base_lr: float, warmup_epochs: int, total_epochs: int) -> float:
    """Per-epoch learning rate: linear ramp to ``base_lr`` over the warmup
    epochs, then cosine decay to zero over the remaining ones.

    The ramp takes the values base_lr*(e+1)/warmup for e < warmup, so the
    final warmup epoch runs exactly at ``base_lr``.
    """
    if total_epochs <= 0:
        return base_lr
    if epoch < warmup_epochs:
        return base_lr * (epoch + 1) / warmup_epochs
    span = max(total_epochs - warmup_epochs, 1)
    progress = (epoch - warmup_epochs) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
