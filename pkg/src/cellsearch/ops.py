"""Candidate operations and the softmax-weighted mixed edge."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .exceptions import ConfigError, SearchSpaceError
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import Tensor, as_tensor

OP_KINDS = (
    "zero",
    "skip_connect",
    "max_pool_3x3",
    "avg_pool_3x3",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
)
PARAMETER_FREE = frozenset({"zero", "skip_connect", "max_pool_3x3", "avg_pool_3x3"})
_ORDER = {k: i for i, k in enumerate(OP_KINDS)}


def op_index(kind: str) -> int:
    """Position of ``kind`` in the canonical enumeration (the tie-break order)."""
    try:
        return _ORDER[kind]
    except KeyError:
        raise SearchSpaceError(f"unknown operation {kind!r}") from None


def canonical_order(kinds: Sequence[str]) -> tuple:
    kinds = tuple(kinds)
    if len(set(kinds)) != len(kinds):
        raise SearchSpaceError(f"duplicate candidates in {kinds}")
    return tuple(sorted(kinds, key=op_index))


# ---------------------------------------------------------------- candidates

class Zero(Module):
    def __init__(self, stride):
        self.stride = stride

    def forward(self, x):
        b, c, h, w = x.shape
        return Tensor(np.zeros((b, c, -(-h // self.stride), -(-w // self.stride))))


class Identity(Module):
    def forward(self, x):
        return x


class FactorizedReduce(Module):
    """ReLU, two stride-2 1x1 convs on pixel-offset grids, concat, BN."""

    def __init__(self, c_in, c_out, *, rng, affine=True):
        if c_out % 2:
            raise ConfigError(f"factorized reduce needs an even channel count, got {c_out}")
        self.conv1 = Conv2d(c_in, c_out // 2, 1, stride=2, rng=rng)
        self.conv2 = Conv2d(c_in, c_out // 2, 1, stride=2, rng=rng)
        self.bn = BatchNorm2d(c_out, affine=affine)

    def forward(self, x):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ConfigError(f"factorized reduce needs even spatial size, got {x.shape[2:]}")
        x = F.relu(x)
        a = self.conv1(x)
        b = self.conv2(F.getitem(x, (slice(None), slice(None), slice(1, None), slice(1, None))))
        return self.bn(F.concat([a, b], axis=1))


class ReLUConvBN(Module):
    def __init__(self, c_in, c_out, kernel, stride, padding, *, rng, affine=True):
        self.conv = Conv2d(c_in, c_out, kernel, stride, padding, rng=rng)
        self.bn = BatchNorm2d(c_out, affine=affine)

    def forward(self, x):
        return self.bn(self.conv(F.relu(x)))


class DilConv(Module):
    """ReLU, dilated depthwise conv, pointwise conv, BN."""

    def __init__(self, c_in, c_out, kernel, stride, padding, dilation, *, rng, affine=True):
        self.depthwise = Conv2d(c_in, c_in, kernel, stride, padding, dilation, groups=c_in, rng=rng)
        self.pointwise = Conv2d(c_in, c_out, 1, rng=rng)
        self.bn = BatchNorm2d(c_out, affine=affine)

    def forward(self, x):
        return self.bn(self.pointwise(self.depthwise(F.relu(x))))


class SepConv(Module):
    """Two stacked (ReLU, depthwise, pointwise, BN) blocks; only the first strides."""

    def __init__(self, c_in, c_out, kernel, stride, padding, *, rng, affine=True):
        self.first = DilConv(c_in, c_in, kernel, stride, padding, 1, rng=rng, affine=affine)
        self.second = DilConv(c_in, c_out, kernel, 1, padding, 1, rng=rng, affine=affine)

    def forward(self, x):
        return self.second(self.first(x))


class Pool(Module):
    def __init__(self, mode, channels, stride, with_bn):
        self.mode, self.stride = mode, stride
        self.bn = BatchNorm2d(channels, affine=False) if with_bn else None

    def forward(self, x):
        pool = F.max_pool2d if self.mode == "max" else F.avg_pool2d
        out = pool(x, 3, self.stride, 1)
        return self.bn(out) if self.bn is not None else out


def build_candidate(kind: str, channels: int, stride: int, *, rng: np.random.Generator,
                    search: bool = True) -> Module:
    """Construct one candidate operation mapping ``(B, C, H, W)`` to ``(B, C, H/s, W/s)``.

    ``search=True`` appends a non-affine BN to the pools, as inside mixed
    edges; the discrete evaluation network uses bare pools.
    """
    op_index(kind)
    if stride not in (1, 2):
        raise ConfigError(f"unsupported stride {stride}")
    if channels < 1:
        raise ConfigError(f"channels must be >= 1, got {channels}")
    c = channels
    if kind == "zero":
        return Zero(stride)
    if kind == "skip_connect":
        return Identity() if stride == 1 else FactorizedReduce(c, c, rng=rng)
    if kind == "max_pool_3x3":
        return Pool("max", c, stride, search)
    if kind == "avg_pool_3x3":
        return Pool("avg", c, stride, search)
    if kind == "sep_conv_3x3":
        return SepConv(c, c, 3, stride, 1, rng=rng)
    if kind == "sep_conv_5x5":
        return SepConv(c, c, 5, stride, 2, rng=rng)
    if kind == "dil_conv_3x3":
        return DilConv(c, c, 3, stride, 2, 2, rng=rng)
    return DilConv(c, c, 5, stride, 4, 2, rng=rng)


def op_param_count(kind: str, channels: int, stride: int) -> int:
    """Closed-form learnable parameter count of :func:`build_candidate`'s module."""
    c = channels
    op_index(kind)
    if kind in ("zero", "max_pool_3x3", "avg_pool_3x3"):
        return 0
    if kind == "skip_connect":
        return 0 if stride == 1 else c * c + 2 * c
    k = 3 if kind.endswith("3x3") else 5
    block = k * k * c + c * c + 2 * c
    return 2 * block if kind.startswith("sep") else block


# ---------------------------------------------------------------- mixed edge

class EdgeState(Module):
    """One cell edge ``from_node -> to_node`` mixing its surviving candidates.

    ``alpha`` is shared with every other cell of the same type and is
    therefore excluded from :meth:`parameters`.
    """

    _skip_collect = ("alpha",)

    def __init__(self, from_node: int, to_node: int, candidates: Sequence[str], alpha: Tensor,
                 channels: int, stride: int, *, rng: np.random.Generator,
                 skip_dropout_rate: float = 0.0):
        if not from_node < to_node:
            raise SearchSpaceError(f"edge needs from < to, got {from_node} -> {to_node}")
        if len(candidates) == 0:
            raise SearchSpaceError(f"edge {from_node}->{to_node} has no candidates")
        self.from_node, self.to_node = from_node, to_node
        self.candidates = canonical_order(candidates)
        if alpha.shape != (len(self.candidates),):
            raise SearchSpaceError(
                f"edge {from_node}->{to_node}: alpha shape {alpha.shape} "
                f"does not match {len(self.candidates)} candidates")
        self.alpha = alpha
        self.stride = stride
        self.ops = [build_candidate(k, channels, stride, rng=rng) for k in self.candidates]
        self.skip_dropout_rate = skip_dropout_rate

    @property
    def skip_dropout_rate(self) -> float:
        return self._skip_dropout_rate

    @skip_dropout_rate.setter
    def skip_dropout_rate(self, rate: float) -> None:
        if not 0.0 <= rate <= 1.0:
            raise SearchSpaceError(f"skip dropout rate must lie in [0, 1], got {rate}")
        self._skip_dropout_rate = float(rate)

    def forward(self, x, mode="train", rng=None):
        return mixed_forward(self, x, mode, rng)


def mixture_weights(edge: EdgeState) -> np.ndarray:
    a = _checked_alpha(edge).data
    e = np.exp(a - a.max())
    return e / e.sum()


def _checked_alpha(edge):
    if len(edge.candidates) == 0:
        raise SearchSpaceError("empty candidate set")
    alpha = as_tensor(edge.alpha)
    if np.isnan(alpha.data).any():
        raise SearchSpaceError(f"NaN in alpha of edge {edge.from_node}->{edge.to_node}")
    return alpha


def mixed_forward(edge: EdgeState, x, mode: str = "train",
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    """Softmax(alpha)-weighted sum of every candidate applied to ``x``.

    ``mode`` only governs the skip-connect dropout; batch-norm behaviour
    follows the modules' own ``training`` flag.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    weights = F.softmax(_checked_alpha(edge))
    rate = edge.skip_dropout_rate
    branches = []
    for kind, op in zip(edge.candidates, edge.ops):
        y = op(x)
        if kind == "skip_connect" and mode == "train" and rate > 0.0:
            if rng is None:
                raise ValueError("skip dropout needs an rng")
            y = F.dropout(y, rate, rng)
        branches.append(y)
    return F.weighted_sum(weights, branches)
