"""Numba-compiled elementwise kernels for the hot training path.

Plain loops, strict IEEE semantics (no fastmath), so results are
deterministic and identical to the equivalent numpy expressions up to
evaluation order -- which these kernels pin down explicitly.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def softmax_last(x):  # pragma: no cover - compiled
    """Softmax over the last axis of a contiguous 3-D array (h, n, m)."""
    h, n, m = x.shape
    out = np.empty_like(x)
    for a in range(h):
        for i in range(n):
            row = x[a, i]
            mx = row[0]
            for j in range(1, m):
                if row[j] > mx:
                    mx = row[j]
            s = 0.0
            for j in range(m):
                e = math.exp(row[j] - mx)
                out[a, i, j] = e
                s += e
            inv = 1.0 / s
            for j in range(m):
                out[a, i, j] *= inv
    return out


@njit(cache=True)
def softmax_last_bwd(y, g, scale):  # pragma: no cover
    """VJP of softmax_last followed by multiplication of logits by `scale`."""
    h, n, m = y.shape
    out = np.empty_like(y)
    for a in range(h):
        for i in range(n):
            dot = 0.0
            for j in range(m):
                dot += y[a, i, j] * g[a, i, j]
            for j in range(m):
                out[a, i, j] = y[a, i, j] * (g[a, i, j] - dot) * scale
    return out


@njit(cache=True)
def layer_norm_fwd(x, gain, bias, eps):  # pragma: no cover
    n, d = x.shape
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty(n)
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        iv = 1.0 / math.sqrt(var + eps)
        inv[i] = iv
        for j in range(d):
            xh = (x[i, j] - mu) * iv
            xhat[i, j] = xh
            out[i, j] = xh * gain[j] + bias[j]
    return out, xhat, inv


@njit(cache=True)
def layer_norm_bwd(g, xhat, inv, gain):  # pragma: no cover
    n, d = g.shape
    gx = np.empty_like(g)
    ggain = np.zeros(d)
    gbias = np.zeros(d)
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            gy = g[i, j] * gain[j]
            m1 += gy
            m2 += gy * xhat[i, j]
            ggain[j] += g[i, j] * xhat[i, j]
            gbias[j] += g[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            gy = g[i, j] * gain[j]
            gx[i, j] = inv[i] * (gy - m1 - xhat[i, j] * m2)
    return gx, ggain, gbias


_GELU_C = 0.7978845608028654  # sqrt(2 / pi)


@njit(cache=True)
def gelu_fwd(x):  # pragma: no cover
    n, d = x.shape
    out = np.empty_like(x)
    tcache = np.empty_like(x)
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            t = math.tanh(_GELU_C * (v + 0.044715 * v * v * v))
            tcache[i, j] = t
            out[i, j] = 0.5 * v * (1.0 + t)
    return out, tcache


@njit(cache=True)
def gelu_bwd(x, tcache, g):  # pragma: no cover
    n, d = x.shape
    out = np.empty_like(x)
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            t = tcache[i, j]
            du = _GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
            out[i, j] = g[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    return out
