"""Small module system on top of the functional primitives."""

from __future__ import annotations

from typing import Iterator, List, Tuple

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype, parameter


class Module:
    """Container that discovers parameters and sub-modules by attribute.

    Attributes listed in ``_skip_collect`` are not traversed; the search
    network uses this to keep shared architecture parameters out of the
    weight list.
    """

    _skip_collect: Tuple[str, ...] = ()
    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for name, value in vars(self).items():
            if name in self._skip_collect or name.startswith("_"):
                continue
            if isinstance(value, (Module, Tensor)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for k, v in enumerate(value):
                    if isinstance(v, (Module, Tensor)):
                        yield f"{name}.{k}", v

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def kaiming_normal(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(get_default_dtype())


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, dilation=1, groups=1, *, rng):
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups
        fan_in = (c_in // groups) * kernel * kernel
        self.weight = parameter(kaiming_normal((c_out, c_in // groups, kernel, kernel), fan_in, rng))

    def forward(self, x):
        return F.conv2d(x, self.weight, self.stride, self.padding, self.dilation, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels, affine=True, momentum=0.1, eps=1e-5):
        self.channels, self.affine, self.momentum, self.eps = channels, affine, momentum, eps
        if affine:
            self.gamma = parameter(np.ones(channels))
            self.beta = parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x):
        gamma = self.gamma if self.affine else None
        beta = self.beta if self.affine else None
        return F.batch_norm(x, gamma, beta, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, n_in, n_out, *, rng):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.bias = parameter(np.zeros(n_out))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class ReLU(Module):
    def forward(self, x):
        return F.relu(x)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def batchnorm_state(module: Module):
    """Copy of every BN running buffer, in traversal order."""
    return [(m.running_mean.copy(), m.running_var.copy())
            for m in module.modules() if isinstance(m, BatchNorm2d)]


def load_batchnorm_state(module: Module, state) -> None:
    bns = [m for m in module.modules() if isinstance(m, BatchNorm2d)]
    for m, (mu, var) in zip(bns, state):
        m.running_mean[...] = mu
        m.running_var[...] = var
