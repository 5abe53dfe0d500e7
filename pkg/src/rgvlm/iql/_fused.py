"""Packed IQL update for the default two-hidden-layer architecture.

The three trained networks (V, Q, policy) are stored slot-wise so the
sparse first layer reads each active feature row once for all of them:

    W1 (D, 3*H)  B1 (3, H)  W2 (3, H, H)  B2 (3, H)  W3 (3, H, A)  B3 (3, A)

The V head uses column 0 of its ``W3``/``B3`` slot only. The arithmetic
mirrors ``losses.py`` term for term (the two paths agree to round-off in
float64); the
training default is float32, which roughly halves the memory traffic of the
first-layer optimiser pass that dominates an update.
"""

from __future__ import annotations

import numba
import numpy as np
import scipy.sparse as sp

from .losses import Params
from .nets import MLP


@numba.njit(cache=True)
def gather_rows(indptr, indices, data, rows):
    """CSR row gather ``X[rows]`` returning ``(indptr, indices, data)``."""
    n = rows.size
    out_ptr = np.empty(n + 1, dtype=indptr.dtype)
    out_ptr[0] = 0
    for i in range(n):
        r = rows[i]
        out_ptr[i + 1] = out_ptr[i] + indptr[r + 1] - indptr[r]
    out_idx = np.empty(out_ptr[n], dtype=indices.dtype)
    out_dat = np.empty(out_ptr[n], dtype=data.dtype)
    for i in range(n):
        r = rows[i]
        k = out_ptr[i]
        for e in range(indptr[r], indptr[r + 1]):
            out_idx[k] = indices[e]
            out_dat[k] = data[e]
            k += 1
    return out_ptr, out_idx, out_dat


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def sparse_dense(indptr, indices, data, W, slots, H):
    """First ``slots`` column blocks of ``X @ W`` for CSR ``X``, laid out as
    ``(slots, n, H)``; the caller adds biases."""
    n = indptr.size - 1
    out = np.zeros((slots, n, H), dtype=W.dtype)
    for r in range(n):
        for e in range(indptr[r], indptr[r + 1]):
            w = W[indices[e]]
            val = data[e]
            for k in range(slots):
                row = out[k, r]
                base = k * H
                for j in range(H):
                    row[j] += val * w[base + j]
    return out


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def sparse_accumulate(indptr, indices, data, delta, G):
    """``G += X.T @ delta`` for CSR ``X``, with ``delta`` laid out as ``(slots, n, H)``."""
    slots, n, H = delta.shape
    for r in range(n):
        for e in range(indptr[r], indptr[r + 1]):
            g = G[indices[e]]
            val = data[e]
            for k in range(slots):
                d = delta[k, r]
                base = k * H
                for j in range(H):
                    g[base + j] += val * d[j]


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def adam_flat(p, g, m, v, step, b1, b2, eps_hat):
    p = p.reshape(-1)
    g = g.reshape(-1)
    m = m.reshape(-1)
    v = v.reshape(-1)
    c1 = 1 - b1
    c2 = 1 - b2
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + c1 * gi
        vi = b2 * v[i] + c2 * (gi * gi)
        m[i] = mi
        v[i] = vi
        p[i] -= step * mi / (np.sqrt(vi) + eps_hat)


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def adam_flat_clear(p, g, m, v, step, b1, b2, eps_hat):
    """:func:`adam_flat` that also zeroes the gradient buffer for reuse."""
    p = p.reshape(-1)
    g = g.reshape(-1)
    m = m.reshape(-1)
    v = v.reshape(-1)
    c1 = 1 - b1
    c2 = 1 - b2
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + c1 * gi
        vi = b2 * v[i] + c2 * (gi * gi)
        m[i] = mi
        v[i] = vi
        p[i] -= step * mi / (np.sqrt(vi) + eps_hat)
        g[i] = 0


@numba.njit(cache=True, error_model="numpy")
def polyak_columns(target, source, offset, tau):
    """``target <- (1 - tau) * target + tau * source[:, offset:offset + k]``."""
    k = target.shape[1]
    for c in range(target.shape[0]):
        t = target[c]
        s = source[c]
        if tau == 1:
            t[:] = s[offset : offset + k]
            continue
        for j in range(k):
            t[j] += tau * (s[offset + j] - t[j])


def packable(params: Params) -> bool:
    shapes = {(net.sizes[0], *net.sizes[1:-1]) for net in params.nets().values()}
    if len(shapes) != 1:
        return False
    shape = next(iter(shapes))
    return len(shape) == 3 and shape[1] == shape[2]


def _triple(x, dtype):
    if isinstance(x, tuple):
        indptr, indices, data = x
        return indptr, indices, data.astype(dtype, copy=False)
    x = x.tocsr() if sp.issparse(x) else sp.csr_matrix(x)
    return x.indptr, x.indices, x.data.astype(dtype, copy=False)


def _head(net: MLP, A: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    W = np.zeros((net.sizes[-2], A), dtype=dtype)
    b = np.zeros(A, dtype=dtype)
    W[:, : net.sizes[-1]] = net.weights[2]
    b[: net.sizes[-1]] = net.biases[2]
    return W, b


def _unpack(W1, b1, W2, b2, W3, b3, k) -> MLP:
    net = MLP.__new__(MLP)
    net.sizes = (W1.shape[0], W1.shape[1], W2.shape[1], k)
    net.weights = [np.array(W1, dtype=np.float64), np.array(W2, dtype=np.float64), np.array(W3[:, :k], dtype=np.float64)]
    net.biases = [np.array(b1, dtype=np.float64), np.array(b2, dtype=np.float64), np.array(b3[:k], dtype=np.float64)]
    return net


class PackedNets:
    """Slot-packed copy of :class:`Params` with Adam state.

    The trained networks share one set of arrays (slots V, Q, policy); the
    target Q network is kept apart so the optimiser pass over the wide first
    layer is a single contiguous sweep.
    """

    def __init__(self, params: Params, dtype=np.float32, lr: float = 3e-4, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        if not packable(params):
            raise ValueError("packing needs four networks with two equal hidden layers")
        online = [params.v_net, params.q_net, params.policy_net]
        H = params.v_net.sizes[1]
        A = params.q_net.sizes[-1]
        self.H, self.A = H, A
        self.dtype = dt = np.dtype(dtype)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.W1 = np.ascontiguousarray(np.concatenate([n.weights[0] for n in online], axis=1), dtype=dt)
        self.B1 = np.stack([n.biases[0] for n in online]).astype(dt)
        self.W2 = np.stack([n.weights[1] for n in online]).astype(dt)
        self.B2 = np.stack([n.biases[1] for n in online]).astype(dt)
        heads = [_head(n, A, dt) for n in online]
        self.W3 = np.stack([h[0] for h in heads])
        self.B3 = np.stack([h[1] for h in heads])
        qt = params.q_target
        self.target = [np.ascontiguousarray(qt.weights[0], dtype=dt), qt.biases[0].astype(dt), qt.weights[1].astype(dt), qt.biases[1].astype(dt), qt.weights[2].astype(dt), qt.biases[2].astype(dt)]
        self.m = [np.zeros_like(a) for a in self.arrays]
        self.v = [np.zeros_like(a) for a in self.arrays]
        self.G1 = np.zeros_like(self.W1)
        self.t = 0

    @property
    def arrays(self) -> list[np.ndarray]:
        return [self.W1, self.B1, self.W2, self.B2, self.W3, self.B3]

    def to_params(self) -> Params:
        H = self.H
        v, q, pi = (
            _unpack(self.W1[:, k * H : (k + 1) * H], self.B1[k], self.W2[k], self.B2[k], self.W3[k], self.B3[k], 1 if k == 0 else self.A)
            for k in range(3)
        )
        return Params(v, q, _unpack(*self.target, self.A), pi)

    def update(self, obs, next_obs, actions, rewards, dones, hyper) -> tuple[dict[str, float], bool]:
        """One step on V, Q and the policy followed by the target update.

        Returns the batch metrics and whether the step was applied; a step
        with non-finite losses leaves every parameter untouched.
        """
        H, dt = self.H, self.dtype
        obs = _triple(obs, dt)
        nxt = _triple(next_obs, dt)
        actions = np.asarray(actions, dtype=np.intp)
        n = len(actions)
        rows = np.arange(n)
        tW1, tb1, tW2, tb2, tW3, tb3 = self.target

        h1 = np.tanh(sparse_dense(*obs, self.W1, 3, H) + self.B1[:, None, :])
        h2 = np.tanh(np.matmul(h1, self.W2) + self.B2[:, None, :])
        out = (np.matmul(h2, self.W3) + self.B3[:, None, :]).astype(np.float64)
        g1 = np.tanh(sparse_dense(*obs, tW1, 1, H)[0] + tb1)
        qt_sa = (np.tanh(g1 @ tW2 + tb2) @ tW3 + tb3).astype(np.float64)[rows, actions]
        h1n = np.tanh(sparse_dense(*nxt, self.W1, 1, H)[0] + self.B1[0])
        v_next = (np.tanh(h1n @ self.W2[0] + self.B2[0]) @ self.W3[0, :, 0] + self.B3[0, 0]).astype(np.float64)

        u = qt_sa - out[0, :, 0]
        weight = np.where(u < 0, 1.0 - hyper.q_expectile, hyper.q_expectile)
        target = np.asarray(rewards, dtype=np.float64) + hyper.gamma * np.where(np.asarray(dones, dtype=bool), 0.0, v_next)
        resid = target - out[1, rows, actions]
        z = out[2] - out[2].max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        awr = np.exp(np.minimum(hyper.beta * u, np.log(hyper.awr_weight_clip)))
        metrics = {
            "v_loss": float(np.mean(weight * (u * u))),
            "q_loss": float(np.mean(resid * resid)),
            "policy_loss": float(-np.mean(awr * logp[rows, actions])),
            "mean_advantage": float(u.mean()),
        }
        if not all(np.isfinite(list(metrics.values()))):
            return metrics, False

        d3 = np.zeros((3, n, self.A))
        d3[0, :, 0] = (-2.0 / n) * weight * u
        d3[1, rows, actions] = (-2.0 / n) * resid
        d3[2] = (awr / n)[:, None] * np.exp(logp)
        d3[2, rows, actions] -= awr / n
        d3 = d3.astype(dt)

        gW3 = np.matmul(h2.transpose(0, 2, 1), d3)
        gB3 = d3.sum(axis=1)
        dh2 = np.matmul(d3, self.W3.transpose(0, 2, 1)) * (1 - h2 * h2)
        gW2 = np.matmul(h1.transpose(0, 2, 1), dh2)
        gB2 = dh2.sum(axis=1)
        dh1 = np.matmul(dh2, self.W2.transpose(0, 2, 1)) * (1 - h1 * h1)
        gB1 = dh1.sum(axis=1)
        sparse_accumulate(*obs, dh1, self.G1)

        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        step = dt.type(self.lr * np.sqrt(c2) / c1)
        eps_hat = dt.type(self.eps * np.sqrt(c2))
        b1, b2, tau = dt.type(self.b1), dt.type(self.b2), dt.type(hyper.polyak_tau)
        adam_flat_clear(self.W1, self.G1, self.m[0], self.v[0], step, b1, b2, eps_hat)
        for k, grad in enumerate((gB1, gW2, gB2, gW3, gB3), start=1):
            adam_flat(self.arrays[k], grad, self.m[k], self.v[k], step, b1, b2, eps_hat)

        polyak_columns(tW1, self.W1, H, tau)
        for t_arr, src in zip(self.target[1:], (self.B1[1], self.W2[1], self.B2[1], self.W3[1], self.B3[1])):
            if tau == 1:
                t_arr[...] = src
            else:
                t_arr += tau * (src - t_arr)
        return metrics, True
