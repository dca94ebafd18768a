"""Adaptive-moment optimizer with decoupled weight decay and a
warmup-cosine learning-rate schedule."""

from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-5, lr_mult=None):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        # per-parameter learning-rate factors, matched by name prefix
        self.lr_mult = dict(lr_mult or {})
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def _factor(self, name):
        for prefix, mult in self.lr_mult.items():
            if name.startswith(prefix):
                return mult
        return 1.0

    def step(self, lr_scale=1.0):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            lr = self.lr * lr_scale * self._factor(name)
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.data -= (lr * update + lr * self.weight_decay * p.data).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self):
        return {"t": self.t,
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state):
        self.t = state["t"]
        for k in self.m:
            self.m[k] = state["m"][k].copy()
            self.v[k] = state["v"][k].copy()


def warmup_cosine(epoch, total_epochs, warmup_epochs):
    """Relative learning-rate factor for the given (0-based) epoch."""
    if warmup_epochs > 0 and epoch < warmup_epochs:
        return (epoch + 1) / warmup_epochs
    if total_epochs <= warmup_epochs:
        return 1.0
    progress = (epoch - warmup_epochs) / (total_epochs - warmup_epochs)
    return 0.5 * (1.0 + np.cos(np.pi * progress))
