"""First-order optimisers and the cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import List, Sequence, Tuple

import numpy as np

from .tensor import Tensor


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay added to the gradient."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        if lr <= 0 or momentum < 0 or weight_decay < 0:
            raise ValueError("lr must be positive; momentum and weight_decay non-negative")
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self._buf: List = [None] * len(self.params)

    def step(self) -> None:
        for k, p in enumerate(self.params):
            if p.grad is None:
                continue
            d = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            if self.momentum:
                if self._buf[k] is None:
                    self._buf[k] = np.array(d, copy=True)
                else:
                    self._buf[k] *= self.momentum
                    self._buf[k] += d
                d = self._buf[k]
            p.data -= self.lr * d

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    """Adam with coupled L2 weight decay (decay term added to the gradient)."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0 or weight_decay < 0 or not (0 <= betas[0] < 1 and 0 <= betas[1] < 1):
            raise ValueError("invalid Adam hyper-parameters")
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def step(self) -> None:
        self._t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self._t
        c2 = 1.0 - b2 ** self._t
        for k, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            self._m[k] = b1 * self._m[k] + (1.0 - b1) * g
            self._v[k] = b2 * self._v[k] + (1.0 - b2) * g * g
            denom = np.sqrt(self._v[k]) / math.sqrt(c2) + self.eps
            p.data -= (self.lr / c1) * self._m[k] / denom

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(base_lr: float, floor: float, epoch: int, total_epochs: int) -> float:
    """Cosine annealing that hits ``floor`` exactly on the last epoch.

    A one-epoch schedule stays at ``base_lr``.
    """
    if total_epochs <= 1:
        return base_lr
    t = min(max(epoch, 0), total_epochs - 1) / (total_epochs - 1)
    return floor + 0.5 * (base_lr - floor) * (1.0 + math.cos(math.pi * t))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(float(sum(float(np.vdot(g, g)) for g in grads)))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= scale
    return total
