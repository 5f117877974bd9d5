"""Fused loops for the memory-bound primitives.

Each kernel is a plain serial loop, so results are bit-reproducible for a
given input regardless of thread settings. Reductions accumulate in float64.
"""

import numpy as np
from numba import njit

# reassociation only: NaN/inf must still propagate so divergence is detected
_FAST = {"reassoc", "contract"}


@njit(cache=True, fastmath=_FAST)
def _valid_range(k, pad, stride, size, out):
    """Output indices o with 0 <= o*stride + k - pad < size."""
    lo = 0
    while lo < out and lo * stride + k - pad < 0:
        lo += 1
    hi = out
    while hi > lo and (hi - 1) * stride + k - pad >= size:
        hi -= 1
    return lo, hi


@njit(cache=True, fastmath=_FAST)
def depthwise_forward(x, w, stride, pad, ho, wo):
    n, c, h, wd = x.shape
    kh, kw = w.shape[1], w.shape[2]
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                y0, y1 = _valid_range(i, pad, stride, h, ho)
                for j in range(kw):
                    x0, x1 = _valid_range(j, pad, stride, wd, wo)
                    wv = w[ch, i, j]
                    for oy in range(y0, y1):
                        iy = oy * stride + i - pad
                        for ox in range(x0, x1):
                            out[b, ch, oy, ox] += wv * x[b, ch, iy, ox * stride + j - pad]
    return out


@njit(cache=True, fastmath=_FAST)
def depthwise_backward(x, w, g, stride, pad):
    n, c, h, wd = x.shape
    kh, kw = w.shape[1], w.shape[2]
    ho, wo = g.shape[2], g.shape[3]
    gx = np.zeros_like(x)
    gw = np.zeros(w.shape, dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                y0, y1 = _valid_range(i, pad, stride, h, ho)
                for j in range(kw):
                    x0, x1 = _valid_range(j, pad, stride, wd, wo)
                    wv = w[ch, i, j]
                    acc = 0.0
                    for oy in range(y0, y1):
                        iy = oy * stride + i - pad
                        for ox in range(x0, x1):
                            ix = ox * stride + j - pad
                            gv = g[b, ch, oy, ox]
                            acc += gv * x[b, ch, iy, ix]
                            gx[b, ch, iy, ix] += gv * wv
                    gw[ch, i, j] += acc
    return gx, gw.astype(x.dtype)


@njit(cache=True, fastmath=_FAST)
def channel_moments(x):
    n, c, h, w = x.shape
    m = n * h * w
    mean = np.zeros(c)
    var = np.zeros(c)
    for ch in range(c):
        s = 0.0
        for b in range(n):
            for y in range(h):
                for z in range(w):
                    s += x[b, ch, y, z]
        mu = s / m
        s2 = 0.0
        for b in range(n):
            for y in range(h):
                for z in range(w):
                    d = x[b, ch, y, z] - mu
                    s2 += d * d
        mean[ch] = mu
        var[ch] = s2 / m
    return mean, var


@njit(cache=True, fastmath=_FAST)
def affine_channels(x, shift, scale, beta):
    """out = (x - shift) * scale + beta per channel."""
    n, c, h, w = x.shape
    out = np.empty_like(x)
    for b in range(n):
        for ch in range(c):
            sh = shift[ch]
            sc = scale[ch]
            be = beta[ch]
            for y in range(h):
                for z in range(w):
                    out[b, ch, y, z] = (x[b, ch, y, z] - sh) * sc + be
    return out


@njit(cache=True, fastmath=_FAST)
def batch_norm_train_backward(x, g, mean, inv_std, gamma):
    n, c, h, w = x.shape
    m = n * h * w
    gx = np.empty_like(x)
    ggamma = np.zeros(c)
    gbeta = np.zeros(c)
    for ch in range(c):
        mu = mean[ch]
        istd = inv_std[ch]
        sg = 0.0
        sgx = 0.0
        for b in range(n):
            for y in range(h):
                for z in range(w):
                    gv = g[b, ch, y, z]
                    sg += gv
                    sgx += gv * (x[b, ch, y, z] - mu) * istd
        ggamma[ch] = sgx
        gbeta[ch] = sg
        k = gamma[ch] * istd / m
        for b in range(n):
            for y in range(h):
                for z in range(w):
                    xh = (x[b, ch, y, z] - mu) * istd
                    gx[b, ch, y, z] = k * (m * g[b, ch, y, z] - sg - xh * sgx)
    return gx, ggamma, gbeta


@njit(cache=True, fastmath=_FAST)
def batch_norm_eval_backward(x, g, mean, inv_std, gamma):
    n, c, h, w = x.shape
    gx = np.empty_like(x)
    ggamma = np.zeros(c)
    gbeta = np.zeros(c)
    for ch in range(c):
        mu = mean[ch]
        istd = inv_std[ch]
        k = gamma[ch] * istd
        sg = 0.0
        sgx = 0.0
        for b in range(n):
            for y in range(h):
                for z in range(w):
                    gv = g[b, ch, y, z]
                    sg += gv
                    sgx += gv * (x[b, ch, y, z] - mu) * istd
                    gx[b, ch, y, z] = gv * k
        ggamma[ch] = sgx
        gbeta[ch] = sg
    return gx, ggamma, gbeta
