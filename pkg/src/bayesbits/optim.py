"""Optimizers and learning-rate schedules operating on autodiff Tensors."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor


class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.base_lr = lr
        self.lr = lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """SGD with (optionally Nesterov) momentum; no weight decay."""

    def __init__(self, params, lr: float, momentum: float = 0.9, nesterov: bool = True):
        super().__init__(params, lr)
        self.momentum = momentum
        self.nesterov = nesterov
        self._buf = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, buf in zip(self.params, self._buf):
            if p.grad is None:
                continue
            buf *= self.momentum
            buf += p.grad
            upd = p.grad + self.momentum * buf if self.nesterov else buf
            p.data -= self.lr * upd


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad ** 2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, params, lr: float, momentum: float = 0.9) -> Optimizer:
    if kind == "adam":
        return Adam(params, lr=lr)
    if kind == "sgd":
        return SGD(params, lr=lr, momentum=momentum, nesterov=True)
    raise ValueError(f"unknown optimizer {kind!r}")


def lr_factor(kind: str, step: int, total: int) -> float:
    """Multiplier on the base learning rate at ``step`` of ``total`` steps.

    linear-decay: constant for the first two thirds, then linear to 0.
    cosine: half-cosine from 1 to 0.
    step: divide by 10 after each third.
    """
    if total <= 0 or kind == "constant":
        return 1.0
    frac = min(max(step / total, 0.0), 1.0)
    if kind == "linear-decay":
        start = 2.0 / 3.0
        return 1.0 if frac < start else max(0.0, (1.0 - frac) / (1.0 - start))
    if kind == "cosine":
        return 0.5 * (1.0 + math.cos(math.pi * frac))
    if kind == "step":
        return 0.1 ** min(int(frac * 3), 2)
    raise ValueError(f"unknown schedule {kind!r}")


def apply_schedule(opts: Sequence[Optimizer], kind: str, step: int, total: int) -> None:
    f = lr_factor(kind, step, total)
    for o in opts:
        o.lr = o.base_lr * f


SCHEDULES: tuple = ("linear-decay", "cosine", "step", "constant")
Factory = Callable[..., Optimizer]
