"""Fused elementwise passes over ``(pixels, channels)`` hidden activations."""

import numba
import numpy as np


@numba.njit(cache=True, fastmath=False)
def bias_relu_stats(z, bias):
    """In place ``z = max(z + bias, 0)``; returns per-channel sum and sum of squares."""
    n, c = z.shape
    s = np.zeros(c)
    sq = np.zeros(c)
    for i in range(n):
        for j in range(c):
            v = z[i, j] + bias[j]
            if v < 0:
                v = 0.0
            z[i, j] = v
            s[j] += v
            sq[j] += v * v
    return s, sq


@numba.njit(cache=True, fastmath=False)
def bias_relu(z, bias):
    n, c = z.shape
    for i in range(n):
        for j in range(c):
            v = z[i, j] + bias[j]
            z[i, j] = v if v > 0 else 0.0


@numba.njit(cache=True, fastmath=False)
def bn_relu_grad(g, r, const, coef):
    """In place ``g = (g + const) * (r > 0) + r * coef`` (coef, const per channel)."""
    n, c = g.shape
    for i in range(n):
        for j in range(c):
            v = r[i, j]
            if v > 0:
                g[i, j] = g[i, j] + const[j] + v * coef[j]
            else:
                g[i, j] = 0.0
