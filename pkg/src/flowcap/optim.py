"""First-order optimizers acting in place on Tensor parameters."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autodiff import Tensor


class SGD:
    """Heavy-ball SGD: ``v <- mu v + g``, ``w <- w - lr v``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-2, momentum: float = 0.9):
        self.params = [p for p in params if p.requires_grad]
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        for p, v in zip(self.params, self._v):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = float(lr)
        self.b1, self.b2 = map(float, betas)
        self.eps = float(eps)
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._s = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        self._t += 1
        c1 = 1.0 - self.b1 ** self._t
        c2 = 1.0 - self.b2 ** self._t
        lr = self.lr * math.sqrt(c2) / c1
        for p, m, s in zip(self.params, self._m, self._s):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            s *= self.b2
            s += (1.0 - self.b2) * p.grad * p.grad
            p.data -= lr * m / (np.sqrt(s) + self.eps)


def make_optimizer(name: str, params, lr: float, momentum: float = 0.9):
    if name == "sgd":
        return SGD(params, lr=lr, momentum=momentum)
    if name == "adam":
        return Adam(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r} (expected 'sgd' or 'adam')")
