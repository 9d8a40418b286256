"""Plain SGD and Adam over lists of parameter tensors.

Both accept per-parameter learning-rate multipliers so that one group (the
text encoder during end-to-end tuning) can move slower than the rest.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .autograd import Tensor


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float, multipliers: dict[int, float] | None = None):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.params = list(params)
        self.lr = lr
        self.multipliers = multipliers or {}

    def step(self) -> None:
        for p in self.params:
            if p.grad is None or not p.requires_grad:
                continue
            p.data = p.data - self.lr * self.multipliers.get(id(p), 1.0) * p.grad


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 multipliers: dict[int, float] | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.multipliers = multipliers or {}
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None or not p.requires_grad:
                continue
            g = p.grad
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            step = self.lr * self.multipliers.get(id(p), 1.0) * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = p.data - step


def make_optimizer(name: str, params, lr: float, multipliers=None):
    name = name.lower()
    if name == "sgd":
        return SGD(params, lr, multipliers)
    if name == "adam":
        return Adam(params, lr, multipliers=multipliers)
    raise ValueError(f"unknown optimizer {name!r}")
