"""Compiled loop kernels for the window-based primitives.

All loops run single-threaded in a fixed order, so results are bit-identical
across runs.  Inputs are already padded by the caller.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def depthwise_forward(xp, w, stride, dil, ho, wo):
    b_, c_ = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    out = np.zeros((b_, c_, ho, wo), dtype=xp.dtype)
    for b in range(b_):
        for c in range(c_):
            for h in range(ho):
                orow = out[b, c, h]
                for i in range(kh):
                    xrow = xp[b, c, h * stride + i * dil]
                    for j in range(kw):
                        wv = w[c, i, j]
                        off = j * dil
                        # unit stride kept separate so the loop vectorises
                        if stride == 1:
                            for q in range(wo):
                                orow[q] += wv * xrow[q + off]
                        else:
                            for q in range(wo):
                                orow[q] += wv * xrow[q * stride + off]
    return out


@njit(cache=True)
def depthwise_grad_weight(xp, g, kh, kw, stride, dil):
    b_, c_, ho, wo = g.shape
    gw = np.zeros((c_, kh, kw), dtype=g.dtype)
    acc = np.empty(wo, dtype=g.dtype)
    for c in range(c_):
        for i in range(kh):
            for j in range(kw):
                off = j * dil
                acc[:] = 0.0
                for b in range(b_):
                    for h in range(ho):
                        xrow = xp[b, c, h * stride + i * dil]
                        grow = g[b, c, h]
                        if stride == 1:
                            for q in range(wo):
                                acc[q] += grow[q] * xrow[q + off]
                        else:
                            for q in range(wo):
                                acc[q] += grow[q] * xrow[q * stride + off]
                s = 0.0
                for q in range(wo):
                    s += acc[q]
                gw[c, i, j] = s
    return gw


@njit(cache=True)
def depthwise_grad_input(hp, wp, w, g, stride, dil):
    b_, c_, ho, wo = g.shape
    kh, kw = w.shape[1], w.shape[2]
    gxp = np.zeros((b_, c_, hp, wp), dtype=g.dtype)
    for b in range(b_):
        for c in range(c_):
            for h in range(ho):
                grow = g[b, c, h]
                for i in range(kh):
                    xrow = gxp[b, c, h * stride + i * dil]
                    for j in range(kw):
                        wv = w[c, i, j]
                        off = j * dil
                        if stride == 1:
                            for q in range(wo):
                                xrow[q + off] += wv * grow[q]
                        else:
                            for q in range(wo):
                                xrow[q * stride + off] += wv * grow[q]
    return gxp


@njit(cache=True)
def maxpool_forward(xp, k, stride, ho, wo):
    b_, c_ = xp.shape[0], xp.shape[1]
    out = np.empty((b_, c_, ho, wo), dtype=xp.dtype)
    arg = np.empty((b_, c_, ho, wo), dtype=np.int32)
    for b in range(b_):
        for c in range(c_):
            for h in range(ho):
                for q in range(wo):
                    best = -np.inf
                    idx = 0
                    for i in range(k):
                        for j in range(k):
                            v = xp[b, c, h * stride + i, q * stride + j]
                            if v > best:
                                best = v
                                idx = i * k + j
                    out[b, c, h, q] = best
                    arg[b, c, h, q] = idx
    return out, arg


@njit(cache=True)
def maxpool_backward(g, arg, hp, wp, k, stride):
    b_, c_, ho, wo = g.shape
    gxp = np.zeros((b_, c_, hp, wp), dtype=g.dtype)
    for b in range(b_):
        for c in range(c_):
            for h in range(ho):
                for q in range(wo):
                    a = arg[b, c, h, q]
                    gxp[b, c, h * stride + a // k, q * stride + a % k] += g[b, c, h, q]
    return gxp


@njit(cache=True)
def avgpool_forward(xp, count, k, stride, ho, wo):
    b_, c_ = xp.shape[0], xp.shape[1]
    out = np.empty((b_, c_, ho, wo), dtype=xp.dtype)
    for b in range(b_):
        for c in range(c_):
            for h in range(ho):
                for q in range(wo):
                    s = 0.0
                    for i in range(k):
                        for j in range(k):
                            s += xp[b, c, h * stride + i, q * stride + j]
                    out[b, c, h, q] = s / count[h, q]
    return out


@njit(cache=True)
def avgpool_backward(g, count, hp, wp, k, stride):
    b_, c_, ho, wo = g.shape
    gxp = np.zeros((b_, c_, hp, wp), dtype=g.dtype)
    for b in range(b_):
        for c in range(c_):
            for h in range(ho):
                for q in range(wo):
                    v = g[b, c, h, q] / count[h, q]
                    for i in range(k):
                        for j in range(k):
                            gxp[b, c, h * stride + i, q * stride + j] += v
    return gxp


@njit(cache=True)
def batchnorm_train_forward(x, eps):
    b_, c_, h_, w_ = x.shape
    n = b_ * h_ * w_
    mu = np.zeros(c_, dtype=x.dtype)
    var = np.zeros(c_, dtype=x.dtype)
    xhat = np.empty_like(x)
    for c in range(c_):
        s = 0.0
        for b in range(b_):
            for h in range(h_):
                for q in range(w_):
                    s += x[b, c, h, q]
        m = s / n
        s2 = 0.0
        for b in range(b_):
            for h in range(h_):
                for q in range(w_):
                    d = x[b, c, h, q] - m
                    s2 += d * d
        v = s2 / n
        inv = 1.0 / np.sqrt(v + eps)
        for b in range(b_):
            for h in range(h_):
                for q in range(w_):
                    xhat[b, c, h, q] = (x[b, c, h, q] - m) * inv
        mu[c] = m
        var[c] = v
    return xhat, mu, var


@njit(cache=True)
def batchnorm_train_backward(gxhat, xhat, inv_std):
    b_, c_, h_, w_ = gxhat.shape
    n = b_ * h_ * w_
    gx = np.empty_like(gxhat)
    for c in range(c_):
        s1 = 0.0
        s2 = 0.0
        for b in range(b_):
            for h in range(h_):
                for q in range(w_):
                    gv = gxhat[b, c, h, q]
                    s1 += gv
                    s2 += gv * xhat[b, c, h, q]
        m1 = s1 / n
        m2 = s2 / n
        inv = inv_std[c]
        for b in range(b_):
            for h in range(h_):
                for q in range(w_):
                    gx[b, c, h, q] = (gxhat[b, c, h, q] - m1 - xhat[b, c, h, q] * m2) * inv
    return gx
