"""Deterministic first-order optimizers over named parameter tensors."""

from __future__ import annotations

import numpy as np


class SGDMomentum:
    def __init__(self, params, lr, momentum=0.9):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros(t.shape) for k, t in self.params.items()}

    def step(self, grads):
        for name, t in self.params.items():
            g = grads[name]
            v = self.velocity[name]
            v *= self.momentum
            v -= self.lr * g
            t.data += v


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in self.params.items()}

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            p.data -= lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


class AdamW(Adam):
    """Adam with decoupled weight decay."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        super().__init__(params, lr, betas, eps)
        self.weight_decay = weight_decay

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        for p in self.params.values():
            p.data -= lr * self.weight_decay * p.data
        super().step(grads, lr=lr)
