"""Small tanh MLPs with hand-written backpropagation, plus Adam."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp

from ._kernels import adam_inplace, csr_matmul, csr_t_matmul


def _as_csr(x):
    x = x.tocsr() if not sp.isspmatrix_csr(x) else x
    return x.indptr, x.indices, x.data


class MLP:
    """``sizes[0] -> ... -> sizes[-1]`` with tanh hidden layers and a linear head.

    Inputs may be dense arrays or scipy sparse matrices; the first layer
    then costs O(nnz) rather than O(batch * in_dim).
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, head_scale: float = 1.0):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        self.sizes = tuple(int(s) for s in sizes)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        last = len(self.sizes) - 2
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            if i == last:
                bound *= head_scale
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "MLP":
        clone = MLP.__new__(MLP)
        clone.sizes = self.sizes
        clone.weights = [W.copy() for W in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for p in self.params:
            p[...] = vec[pos : pos + p.size].reshape(p.shape)
            pos += p.size
        if pos != len(vec):
            raise ValueError(f"expected {pos} parameters, got {len(vec)}")

    def forward(self, x, keep: bool = False):
        """Return the output, and the activations needed by ``backward`` if ``keep``."""
        acts = [x]
        h = x
        n_layers = len(self.weights)
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if sp.issparse(h):
                z = csr_matmul(*_as_csr(h), W, b)
            else:
                z = h @ W + b
            h = np.tanh(z) if i < n_layers - 1 else z
            if keep and i < n_layers - 1:
                acts.append(h)
        return (h, acts) if keep else h

    def backward(self, acts: list, dout: np.ndarray) -> list[np.ndarray]:
        """Gradients in ``params`` order, given dLoss/dOutput."""
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        delta = dout
        for i in range(len(self.weights) - 1, -1, -1):
            h = acts[i]
            if sp.issparse(h):
                grads[2 * i] = csr_t_matmul(*_as_csr(h), np.ascontiguousarray(delta), h.shape[1])
            else:
                grads[2 * i] = h.T @ delta
            grads[2 * i + 1] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (1.0 - acts[i] ** 2)
        return grads


class Adam:
    def __init__(self, params: Sequence[np.ndarray], lr: float = 3e-4, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        step = self.lr * np.sqrt(c2) / c1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            adam_inplace(p, np.ascontiguousarray(g), m, v, step, self.b1, self.b2, self.eps * np.sqrt(c2))
