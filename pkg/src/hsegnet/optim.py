"""Plain SGD-with-momentum and Adam over a name -> Tensor parameter map."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class SGDMomentum:
    def __init__(self, lr: float = 0.05, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, named: list[tuple[str, Tensor]]) -> None:
        for name, p in named:
            if p.grad is None:
                continue
            v = self.velocity.get(name)
            v = p.grad.copy() if v is None else self.momentum * v + p.grad
            self.velocity[name] = v
            p.data -= (self.lr * v).astype(p.dtype, copy=False)


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, named: list[tuple[str, Tensor]]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in named:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def make_optimizer(name: str, lr: float, momentum: float = 0.9, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    if name == "sgd_momentum":
        return SGDMomentum(lr, momentum)
    if name == "adam":
        return Adam(lr, beta1, beta2, eps)
    raise ValueError(f"unknown optimizer {name!r}")
