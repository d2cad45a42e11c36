"""Differentiable primitives over :class:`~cellsearch.tensor.Tensor`.

Each primitive computes its forward value with numpy and, when a tape is
active and some input requires a gradient, records a closure that maps the
output gradient to one gradient per input (``None`` for non-differentiable
inputs).  All reductions use a fixed order, so repeated calls are
bit-identical.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from . import _kernels
from .exceptions import NonFiniteError, ShapeError, TapeError
from .tensor import Tensor, as_tensor, current_tape


def _record(name, inputs, out_data, backward_fn) -> Tensor:
    tape = current_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(out_data)
    for t in inputs:
        if t.tape_id is not None and t._tape is not tape:
            raise TapeError(f"{name}: input recorded on a different tape")
    return tape.record(name, inputs, out_data, backward_fn)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record("add", (a, b), a.data + b.data, backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record("sub", (a, b), a.data - b.data, backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", (a, b), ad * bd, backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _record("relu", (x,), x.data * mask, backward)


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g.reshape(()), shape).copy(),)

    return _record("sum", (x,), np.asarray(x.data.sum()), backward)


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.size

    def backward(g):
        return (np.full(shape, g.reshape(()) / n),)

    return _record("mean", (x,), np.asarray(x.data.mean()), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None

    def backward(g):
        return (g.reshape(old),)

    return _record("reshape", (x,), out, backward)


def getitem(x, index) -> Tensor:
    """Basic (slice/integer) indexing; advanced indexing is not supported."""
    x = as_tensor(x)
    shape = x.shape
    out = x.data[index]

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _record("getitem", (x,), out, backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _record("matmul", (a, b), ad @ bd, backward)


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------------- structure

def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", (), detail="no inputs")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[k] != ref[k] for k in range(len(ref)) if k != axis % len(ref)
        ):
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) if t.requires_grad else None
            for k, t in enumerate(tensors)
        )

    return _record("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), backward)


def split(x, sizes: Sequence[int], axis: int = 1) -> List[Tensor]:
    x = as_tensor(x)
    if int(np.sum(sizes)) != x.shape[axis]:
        raise ShapeError("split", x.shape, tuple(sizes))
    out, start = [], 0
    for n in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + n)
        out.append(getitem(x, tuple(index)))
        start += n
    return out


def weighted_sum(weights, tensors: Sequence) -> Tensor:
    """``sum_k weights[k] * tensors[k]`` for a weight vector and same-shape tensors."""
    weights = as_tensor(weights)
    tensors = [as_tensor(t) for t in tensors]
    if weights.ndim != 1 or weights.shape[0] != len(tensors):
        raise ShapeError("weighted_sum", weights.shape, (len(tensors),))
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise ShapeError("weighted_sum", ref, t.shape)
    w = weights.data
    out = np.zeros(ref, dtype=w.dtype)
    for k, t in enumerate(tensors):
        out += w[k] * t.data

    def backward(g):
        gw = None
        if weights.requires_grad:
            gw = np.array([float(np.vdot(g, t.data)) for t in tensors], dtype=g.dtype)
        return (gw,) + tuple(w[k] * g if t.requires_grad else None for k, t in enumerate(tensors))

    return _record("weighted_sum", [weights] + tensors, out, backward)


# ---------------------------------------------------------------- probability

def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (x,), s, backward)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", (x,), out, backward)


def cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of ``(B, K)`` logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy", logits.shape, labels.shape, detail="label out of range")
    n = logits.shape[0]
    with np.errstate(invalid="ignore", over="ignore"):
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - lse
        loss = -logp[np.arange(n), labels].mean()
    if not np.isfinite(loss):
        tape = current_tape()
        where = f"tape node {tape._next_id}" if tape is not None else "untaped forward"
        raise NonFiniteError("cross_entropy produced a non-finite loss", location=where)
    p = np.exp(logp)

    def backward(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g.reshape(()) / n),)

    return _record("cross_entropy", (logits,), np.asarray(loss), backward)


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, rescale survivors."""
    x = as_tensor(x)
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1], got {rate}")
    if rate == 0.0:
        return x
    if rate == 1.0:
        return mul(x, np.zeros(x.shape))
    keep = rng.random(x.shape) >= rate
    return apply_mask(x, keep, 1.0 / (1.0 - rate))


def apply_mask(x, mask: np.ndarray, scale: float = 1.0) -> Tensor:
    """Multiply by a fixed (broadcastable) 0/1 mask and a scale factor."""
    return mul(x, np.asarray(mask, dtype=as_tensor(x).data.dtype) * scale)


# ---------------------------------------------------------------- convolution

def _out_size(n, k, stride, padding, dilation):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _pad(x, padding, value=0.0):
    if padding == 0:
        return x
    b, c, h, w = x.shape
    out = np.full((b, c, h + 2 * padding, w + 2 * padding), value, dtype=x.dtype)
    out[:, :, padding:padding + h, padding:padding + w] = x
    return out


def _window_slices(kh, kw, stride, dilation, ho, wo):
    for i in range(kh):
        for j in range(kw):
            r, c = i * dilation, j * dilation
            yield (slice(None), slice(None),
                   slice(r, r + stride * (ho - 1) + 1, stride),
                   slice(c, c + stride * (wo - 1) + 1, stride))


def conv2d(x, weight, stride: int = 1, padding: int = 0, dilation: int = 1,
           groups: int = 1) -> Tensor:
    """2-D cross-correlation, ``(B, C, H, W) * (O, C/groups, kh, kw)``, no bias.

    Depthwise convolutions run through a compiled loop kernel, 1x1
    convolutions are batched matrix products, everything else uses im2col.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", x.shape, weight.shape)
    b, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if groups < 1 or c % groups or o % groups or cg * groups != c:
        raise ShapeError("conv2d", x.shape, weight.shape, detail=f"groups={groups}")
    ho = _out_size(h, kh, stride, padding, dilation)
    wo = _out_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="empty output")
    wd = weight.data

    if cg == 1 and o == c and groups == c:
        xp = _pad(x.data, padding)
        wk = np.ascontiguousarray(wd[:, 0])
        out = _kernels.depthwise_forward(xp, wk, stride, dilation, ho, wo)

        def backward(g):
            g = np.ascontiguousarray(g)
            gx = gw = None
            if weight.requires_grad:
                gw = _kernels.depthwise_grad_weight(xp, g, kh, kw, stride, dilation)[:, None]
            if x.requires_grad:
                gxp = _kernels.depthwise_grad_input(xp.shape[2], xp.shape[3], wk, g, stride, dilation)
                gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            return gx, gw

        return _record("conv2d", (x, weight), out, backward)

    if kh == 1 and kw == 1 and padding == 0 and groups == 1:
        xs = x.data if stride == 1 else x.data[:, :, ::stride, ::stride]
        xs = np.ascontiguousarray(xs).reshape(b, c, ho * wo)
        w2 = wd.reshape(o, c)
        out = np.matmul(w2, xs).reshape(b, o, ho, wo)

        def backward(g):
            g2 = g.reshape(b, o, ho * wo)
            gw = gx = None
            if weight.requires_grad:
                gw = np.tensordot(g2, xs, axes=([0, 2], [0, 2])).reshape(wd.shape)
            if x.requires_grad:
                gxs = np.matmul(w2.T, g2).reshape(b, c, ho, wo)
                if stride == 1:
                    gx = gxs
                else:
                    gx = np.zeros(x.shape, dtype=g.dtype)
                    gx[:, :, ::stride, ::stride] = gxs
            return gx, gw

        return _record("conv2d", (x, weight), out, backward)

    kk = kh * kw
    xp = _pad(x.data, padding)
    slices = list(_window_slices(kh, kw, stride, dilation, ho, wo))
    cols = np.empty((b, c, kk, ho, wo), dtype=xp.dtype)
    for k, sl in enumerate(slices):
        cols[:, :, k] = xp[sl]
    colg = cols.reshape(b, groups, cg * kk, ho * wo)
    wg = wd.reshape(groups, o // groups, cg * kk)
    out = np.matmul(wg[None], colg).reshape(b, o, ho, wo)

    def backward(g):
        gg = g.reshape(b, groups, o // groups, ho * wo)
        gw = gx = None
        if weight.requires_grad:
            gw = np.zeros(wg.shape, dtype=g.dtype)
            for gi in range(groups):
                gw[gi] = np.tensordot(gg[:, gi], colg[:, gi], axes=([0, 2], [0, 2]))
            gw = gw.reshape(wd.shape)
        if x.requires_grad:
            gcols = np.matmul(np.swapaxes(wg, 1, 2)[None], gg).reshape(b, c, kk, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for k, sl in enumerate(slices):
                gxp[sl] += gcols[:, :, k]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw

    return _record("conv2d", (x, weight), out, backward)


def _pool_geometry(x, kernel, stride, padding):
    if x.ndim != 4:
        raise ShapeError("pool2d", x.shape, detail="expected (B, C, H, W)")
    b, c, h, w = x.shape
    ho = _out_size(h, kernel, stride, padding, 1)
    wo = _out_size(w, kernel, stride, padding, 1)
    if ho < 1 or wo < 1 or padding * 2 > kernel:
        raise ShapeError("pool2d", x.shape, detail=f"kernel={kernel} stride={stride} padding={padding}")
    return b, c, h, w, ho, wo


def max_pool2d(x, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    x = as_tensor(x)
    b, c, h, w, ho, wo = _pool_geometry(x, kernel, stride, padding)
    xp = _pad(x.data, padding, value=-np.inf)
    out, arg = _kernels.maxpool_forward(xp, kernel, stride, ho, wo)

    def backward(g):
        gxp = _kernels.maxpool_backward(np.ascontiguousarray(g), arg, xp.shape[2], xp.shape[3],
                                        kernel, stride)
        return (gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp,)

    return _record("max_pool2d", (x,), out, backward)


def avg_pool2d(x, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Average pooling that excludes padded positions from the divisor."""
    x = as_tensor(x)
    b, c, h, w, ho, wo = _pool_geometry(x, kernel, stride, padding)
    xp = _pad(x.data, padding)
    ones = _pad(np.ones((1, 1, h, w)), padding)
    count = np.zeros((ho, wo))
    for sl in _window_slices(kernel, kernel, stride, 1, ho, wo):
        count += ones[sl][0, 0]
    out = _kernels.avgpool_forward(xp, count, kernel, stride, ho, wo)

    def backward(g):
        gxp = _kernels.avgpool_backward(np.ascontiguousarray(g), count, xp.shape[2], xp.shape[3],
                                        kernel, stride)
        return (gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp,)

    return _record("avg_pool2d", (x,), out, backward)


def global_avg_pool(x) -> Tensor:
    """``(B, C, H, W) -> (B, C)`` spatial mean."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape)
    b, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (b, c, h, w)).copy(),)

    return _record("global_avg_pool", (x,), x.data.mean(axis=(2, 3)), backward)


# ---------------------------------------------------------------- normalisation

def batch_norm(x, gamma: Optional[Tensor], beta: Optional[Tensor],
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation over ``(B, H, W)``.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, like the common frameworks).
    ``gamma``/``beta`` may be ``None`` for the non-affine variant.
    """
    x = as_tensor(x)
    if x.ndim != 4 or running_mean.shape != (x.shape[1],):
        raise ShapeError("batch_norm", x.shape, running_mean.shape)
    affine = gamma is not None
    if affine and (gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],)):
        raise ShapeError("batch_norm", x.shape, gamma.shape)
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        xhat, mu, var = _kernels.batchnorm_train_forward(np.ascontiguousarray(x.data), eps)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * n / (n - 1) if n > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean.copy(), running_var.copy()
        xhat = (x.data - mu[None, :, None, None]) * (1.0 / np.sqrt(var + eps))[None, :, None, None]
    inv_std = 1.0 / np.sqrt(var + eps)
    if affine:
        out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
        inputs = (x, gamma, beta)
    else:
        out = xhat
        inputs = (x,)

    def backward(g):
        gxhat = g * gamma.data[None, :, None, None] if affine else g
        if not x.requires_grad:
            gx = None
        elif training:
            gx = _kernels.batchnorm_train_backward(np.ascontiguousarray(gxhat), xhat, inv_std)
        else:
            gx = gxhat * inv_std[None, :, None, None]
        if not affine:
            return (gx,)
        ggamma = np.einsum("bchw,bchw->c", g, xhat) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _record("batch_norm", inputs, out, backward)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))
