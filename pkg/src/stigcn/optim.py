"""Nesterov SGD and the step learning-rate schedule."""
from __future__ import annotations

import numpy as np

__all__ = ["nesterov_step", "SGDNesterov", "step_lr"]


def nesterov_step(w, grad, velocity, lr, momentum=0.9, weight_decay=0.0):
    """One Nesterov update, returning ``(w_new, v_new)``.

    ``g = grad + wd * w``, ``v' = mu v - lr g``, ``w' = w + mu v' - lr g``.
    """
    g = grad + weight_decay * w
    v = momentum * velocity - lr * g
    return w + momentum * v - lr * g, v


def step_lr(epoch, base_lr, decay_epochs=(), factor=0.1):
    """Learning rate at ``epoch`` (0-based): multiplied by ``factor`` once per
    decay epoch already reached."""
    return base_lr * factor ** sum(1 for d in decay_epochs if epoch >= d)


class SGDNesterov:
    """In-place Nesterov SGD over a list of ``Param``; decay hits every tensor."""

    def __init__(self, params, lr=0.1, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        if self.lr == 0:
            return
        for i, p in enumerate(self.params):
            w, v = nesterov_step(p.value, p.grad, self.velocity[i], self.lr,
                                 self.momentum, self.weight_decay)
            p.value = w.astype(p.value.dtype, copy=False)
            self.velocity[i] = v.astype(p.value.dtype, copy=False)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
