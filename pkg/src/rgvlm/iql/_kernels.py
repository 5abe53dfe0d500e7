"""Fused numba loops for the training hot path."""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def adam_inplace(p, g, m, v, step, b1, b2, eps_hat):
    p = p.reshape(-1)
    g = g.reshape(-1)
    m = m.reshape(-1)
    v = v.reshape(-1)
    c1 = 1.0 - b1
    c2 = 1.0 - b2
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + c1 * gi
        vi = b2 * v[i] + c2 * (gi * gi)
        m[i] = mi
        v[i] = vi
        p[i] -= step * mi / (np.sqrt(vi) + eps_hat)


@numba.njit(cache=True, error_model="numpy")
def polyak_inplace(target, source, tau):
    t = target.reshape(-1)
    s = source.reshape(-1)
    # t + tau * (s - t) leaves t bit-identical where s == t; tau == 1 copies
    if tau == 1.0:
        t[:] = s
        return
    for i in range(t.size):
        t[i] += tau * (s[i] - t[i])


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def csr_matmul(indptr, indices, data, W, b):
    """``X @ W + b`` for CSR ``X``."""
    n = indptr.size - 1
    k = W.shape[1]
    out = np.empty((n, k))
    for r in range(n):
        for j in range(k):
            out[r, j] = b[j]
        for e in range(indptr[r], indptr[r + 1]):
            c = indices[e]
            val = data[e]
            for j in range(k):
                out[r, j] += val * W[c, j]
    return out


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def csr_t_matmul(indptr, indices, data, delta, n_cols):
    """``X.T @ delta`` for CSR ``X``."""
    n = indptr.size - 1
    k = delta.shape[1]
    out = np.zeros((n_cols, k))
    for r in range(n):
        for e in range(indptr[r], indptr[r + 1]):
            c = indices[e]
            val = data[e]
            for j in range(k):
                out[c, j] += val * delta[r, j]
    return out
