"""Central finite-difference checks for every primitive and candidate operation.

Each case builds float64 leaves and a function producing a tensor; the check
contracts that tensor with a fixed random projection and compares the
taped gradient of the resulting scalar with central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .ops import OP_KINDS, EdgeState, build_candidate, mixed_forward
from .tensor import Tape, Tensor, parameter

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4
# Central differences at h = 1e-5 carry roughly 1e-9 of absolute roundoff on
# these O(10) objectives, so elements below 1e-5 cannot be resolved to 1e-4
# relative precision; they are compared on an absolute scale instead.
DENOM_FLOOR = 1e-5

Case = Tuple[Callable[[], Tensor], List[Tensor]]


def _scalar(out: Tensor, proj: np.ndarray) -> Tensor:
    return F.sum(F.mul(out, proj))


def analytic_grads(fn, inputs: Sequence[Tensor], proj) -> List[np.ndarray]:
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = fn()
        if not out.requires_grad:
            # output does not depend on any input (the zero operation)
            return [np.zeros_like(t.data) for t in inputs]
        tape.backward(_scalar(out, proj))
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def numeric_grads(fn, inputs: Sequence[Tensor], proj, h: float = DEFAULT_STEP) -> List[np.ndarray]:
    def value():
        return float(np.vdot(fn().data, proj))

    grads = []
    for t in inputs:
        g = np.zeros_like(t.data)
        flat, gflat = t.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = value()
            flat[i] = orig - h
            down = value()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(a: Sequence[np.ndarray], n: Sequence[np.ndarray]) -> float:
    worst = 0.0
    for x, y in zip(a, n):
        if x.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), DENOM_FLOOR)
        worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst


def check_case(fn, inputs: Sequence[Tensor], rng: np.random.Generator, h: float = DEFAULT_STEP) -> float:
    with Tape():
        probe = fn()
    proj = rng.standard_normal(probe.shape)
    return max_relative_error(analytic_grads(fn, inputs, proj), numeric_grads(fn, inputs, proj, h))


# ---------------------------------------------------------------- the suite

def _leaf(rng, *shape, scale=1.0):
    return parameter(rng.standard_normal(shape) * scale)


def _separated(rng, shape):
    """Inputs whose entries are pairwise at least 1e-3 apart, so max/relu have no kinks within h."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) * 1e-2 + rng.uniform(-2e-3, 2e-3, n)
    return parameter(vals.reshape(shape))


def _binary(op):
    def build(rng):
        a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
        return (lambda: op(a, b)), [a, b]
    return build


def _broadcast_add(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 3, 1)
    return (lambda: F.add(a, b)), [a, b]


def _relu(rng):
    x = _separated(rng, (4, 5))
    return (lambda: F.relu(x)), [x]


def _unary(op, shape=(3, 4)):
    def build(rng):
        x = _leaf(rng, *shape)
        return (lambda: op(x)), [x]
    return build


def _matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 5)
    return (lambda: F.matmul(a, b)), [a, b]


def _linear(rng):
    x, w, b = _leaf(rng, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)
    return (lambda: F.linear(x, w, b)), [x, w, b]


def _concat(rng):
    a, b = _leaf(rng, 2, 3, 2), _leaf(rng, 2, 1, 2)
    return (lambda: F.concat([a, b], axis=1)), [a, b]


def _split(rng):
    x = _leaf(rng, 2, 5, 3)
    return (lambda: F.concat(F.split(x, [2, 3], axis=1)[::-1], axis=1)), [x]


def _weighted_sum(rng):
    w = _leaf(rng, 3)
    ts = [_leaf(rng, 2, 4) for _ in range(3)]
    return (lambda: F.weighted_sum(w, ts)), [w] + ts


def _cross_entropy(rng):
    x = _leaf(rng, 5, 4)
    labels = rng.integers(0, 4, 5)
    return (lambda: F.cross_entropy(x, labels)), [x]


def _dropout(rng):
    x = _leaf(rng, 4, 6)
    mask = rng.random((4, 6)) >= 0.3
    return (lambda: F.apply_mask(x, mask, 1 / 0.7)), [x]


def _conv(stride=1, padding=1, dilation=1, groups=1, k=3, c_in=4, c_out=4):
    def build(rng):
        x = _leaf(rng, 2, c_in, 6, 6)
        w = _leaf(rng, c_out, c_in // groups, k, k, scale=0.5)
        return (lambda: F.conv2d(x, w, stride, padding, dilation, groups)), [x, w]
    return build


def _pool(fn, stride):
    def build(rng):
        x = _separated(rng, (2, 2, 6, 6))
        return (lambda: fn(x, 3, stride, 1)), [x]
    return build


def _batch_norm(training, affine=True):
    def build(rng):
        x = _leaf(rng, 4, 3, 3, 3)
        gamma, beta = (_leaf(rng, 3), _leaf(rng, 3)) if affine else (None, None)
        rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)

        def fn():
            # copies keep repeated evaluations independent of the in-place buffer update
            return F.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), training)
        return fn, [t for t in (x, gamma, beta) if t is not None]
    return build


def _candidate(kind, stride):
    def build(rng):
        op = build_candidate(kind, 4, stride, rng=rng)
        op.train(True)
        x = _separated(rng, (2, 4, 4, 4)) if "pool" in kind else _leaf(rng, 2, 4, 4, 4)
        return (lambda: op(x)), [x] + op.parameters()
    return build


def _mixed_edge(rng):
    alpha = _leaf(rng, len(OP_KINDS))
    edge = EdgeState(0, 2, OP_KINDS, alpha, 3, 1, rng=rng)
    edge.train(True)
    x = _leaf(rng, 2, 3, 4, 4)
    return (lambda: mixed_forward(edge, x, "eval")), [alpha, x]


def _chain(rng):
    x = _leaf(rng, 3, 2, 6, 6)
    w = _leaf(rng, 4, 2, 3, 3, scale=0.5)
    gamma, beta = _leaf(rng, 4), _leaf(rng, 4)
    lw, lb = _leaf(rng, 4, 3), _leaf(rng, 3)

    def fn():
        h = F.batch_norm(F.conv2d(x, w, 1, 1), gamma, beta, np.zeros(4), np.ones(4), True)
        h = F.avg_pool2d(F.relu(h), 3, 2, 1)
        return F.linear(F.global_avg_pool(h), lw, lb)
    return fn, [x, w, gamma, beta, lw, lb]


def primitive_suite() -> Dict[str, Callable[[np.random.Generator], Case]]:
    suite = {
        "add": _binary(F.add),
        "add_broadcast": _broadcast_add,
        "sub": _binary(F.sub),
        "mul": _binary(F.mul),
        "relu": _relu,
        "sum": _unary(F.sum),
        "mean": _unary(F.mean),
        "reshape": _unary(lambda x: F.reshape(x, (4, 3))),
        "getitem": _unary(lambda x: F.getitem(x, (slice(1, 3), slice(None, None, 2)))),
        "matmul": _matmul,
        "linear": _linear,
        "concat": _concat,
        "split": _split,
        "weighted_sum": _weighted_sum,
        "softmax": _unary(F.softmax),
        "log_softmax": _unary(F.log_softmax),
        "cross_entropy": _cross_entropy,
        "dropout_mask": _dropout,
        "conv2d_3x3": _conv(),
        "conv2d_1x1": _conv(padding=0, k=1, c_out=5),
        "conv2d_1x1_stride2": _conv(stride=2, padding=0, k=1),
        "conv2d_stride2": _conv(stride=2),
        "conv2d_dilated": _conv(padding=2, dilation=2),
        "conv2d_grouped": _conv(groups=2),
        "conv2d_depthwise": _conv(groups=4),
        "conv2d_depthwise_stride2_dil2": _conv(stride=2, padding=2, dilation=2, groups=4),
        "max_pool2d": _pool(F.max_pool2d, 1),
        "max_pool2d_stride2": _pool(F.max_pool2d, 2),
        "avg_pool2d": _pool(F.avg_pool2d, 1),
        "avg_pool2d_stride2": _pool(F.avg_pool2d, 2),
        "global_avg_pool": _unary(F.global_avg_pool, (2, 3, 4, 4)),
        "batch_norm_train": _batch_norm(True),
        "batch_norm_train_plain": _batch_norm(True, affine=False),
        "batch_norm_eval": _batch_norm(False),
        "mixed_edge": _mixed_edge,
        "conv_bn_relu_pool_linear": _chain,
    }
    for kind in OP_KINDS:
        for stride in (1, 2):
            suite[f"op:{kind}/s{stride}"] = _candidate(kind, stride)
    return suite


@dataclass
class CheckResult:
    name: str
    seeds: int
    max_rel_error: float
    passed: bool
    seconds: float


def run_suite(seeds: int = 20, tol: float = DEFAULT_TOL, h: float = DEFAULT_STEP,
              names: Optional[Sequence[str]] = None) -> List[CheckResult]:
    suite = primitive_suite()
    results = []
    for name in (names or list(suite)):
        t0 = time.perf_counter()
        worst = 0.0
        for seed in range(seeds):
            rng = np.random.default_rng([seed, len(name)])
            fn, inputs = suite[name](rng)
            worst = max(worst, check_case(fn, inputs, rng, h))
        results.append(CheckResult(name, seeds, worst, worst < tol, time.perf_counter() - t0))
    return results


def format_table(results: Sequence[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'case':<{width}}  {'max rel err':>12}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.max_rel_error:12.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
