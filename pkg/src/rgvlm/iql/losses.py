"""Language-conditioned IQL objectives with analytic gradients.

Value regression uses the asymmetric squared (expectile) loss on the
target-Q minus V residual, Q regression uses a one-step TD target
bootstrapped from V, and the policy is extracted by advantage-weighted
log-likelihood. Every function returns ``(loss, grads)`` where ``grads``
follows the ``params`` order of the single network that loss trains.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..dataset import TransitionBatch
from .nets import MLP


@dataclass
class Params:
    v_net: MLP
    q_net: MLP
    q_target: MLP
    policy_net: MLP

    def nets(self) -> dict[str, MLP]:
        return {"v_net": self.v_net, "q_net": self.q_net, "q_target": self.q_target, "policy_net": self.policy_net}

    def copy(self) -> "Params":
        return Params(self.v_net.copy(), self.q_net.copy(), self.q_target.copy(), self.policy_net.copy())


def init_params(in_dim: int, num_actions: int, hidden: tuple[int, ...], rng: np.random.Generator) -> Params:
    v = MLP((in_dim, *hidden, 1), rng)
    q = MLP((in_dim, *hidden, num_actions), rng)
    pi = MLP((in_dim, *hidden, num_actions), rng, head_scale=0.01)
    return Params(v, q, q.copy(), pi)


def _check_expectile(q: float) -> None:
    if not 0.5 <= q < 1.0:
        raise ValueError(f"expectile must lie in [0.5, 1), got {q}")


def expectile_loss(x, q: float):
    """``|q - 1(x < 0)| * x**2``, elementwise."""
    _check_expectile(q)
    x = np.asarray(x, dtype=np.float64)
    weight = np.where(x < 0, 1.0 - q, q)
    out = weight * (x * x)
    return float(out) if out.ndim == 0 else out


def _taken(values: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return values[np.arange(len(actions)), actions]


def _v_loss_from(v_out, v_acts, qt_sa, expectile, v_net):
    u = qt_sa - v_out[:, 0]
    weight = np.where(u < 0, 1.0 - expectile, expectile)
    n = len(u)
    loss = float(np.mean(weight * (u * u)))
    dv = (-2.0 / n) * weight * u
    return loss, v_net.backward(v_acts, dv[:, None])


def v_loss(params: Params, batch: TransitionBatch, expectile: float = 0.7):
    """Mean expectile loss of ``Q_target(s, a) - V(s)``; gradient w.r.t. ``v_net`` only."""
    _check_expectile(expectile)
    qt_sa = _taken(params.q_target.forward(batch.observations), batch.actions)
    v_out, v_acts = params.v_net.forward(batch.observations, keep=True)
    return _v_loss_from(v_out, v_acts, qt_sa, expectile, params.v_net)


def td_targets(params: Params, batch: TransitionBatch, gamma: float) -> np.ndarray:
    v_next = params.v_net.forward(batch.next_observations)[:, 0]
    return batch.rewards + gamma * np.where(batch.dones, 0.0, v_next)


def _q_loss_from(q_out, q_acts, actions, target, q_net):
    n = len(actions)
    resid = target - _taken(q_out, actions)
    loss = float(np.mean(resid * resid))
    dq = np.zeros_like(q_out)
    dq[np.arange(n), actions] = (-2.0 / n) * resid
    return loss, q_net.backward(q_acts, dq)


def q_loss(params: Params, batch: TransitionBatch, gamma: float = 0.99):
    """Mean squared TD error; V(s') is a constant and masked on terminal samples."""
    target = td_targets(params, batch, gamma)
    q_out, q_acts = params.q_net.forward(batch.observations, keep=True)
    return _q_loss_from(q_out, q_acts, batch.actions, target, params.q_net)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def awr_weights(advantage: np.ndarray, beta: float, clip: float) -> np.ndarray:
    # clip in log space so exp never overflows
    return np.exp(np.minimum(beta * advantage, np.log(clip)))


def _policy_loss_from(logits, pi_acts, actions, weights, policy_net):
    n = len(actions)
    logp = log_softmax(logits)
    loss = float(-np.mean(weights * _taken(logp, actions)))
    probs = np.exp(logp)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), actions] = 1.0
    dlogits = (weights / n)[:, None] * (probs - onehot)
    return loss, policy_net.backward(pi_acts, dlogits)


def advantages(params: Params, batch: TransitionBatch) -> np.ndarray:
    qt_sa = _taken(params.q_target.forward(batch.observations), batch.actions)
    return qt_sa - params.v_net.forward(batch.observations)[:, 0]


def policy_loss(params: Params, batch: TransitionBatch, beta: float = 3.0, clip: float = 100.0):
    """Negative advantage-weighted log-likelihood of the batch actions.

    Weights ``min(exp(beta * A), clip)`` are treated as constants.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    weights = awr_weights(advantages(params, batch), beta, clip)
    logits, acts = params.policy_net.forward(batch.observations, keep=True)
    return _policy_loss_from(logits, acts, batch.actions, weights, params.policy_net)


# ---------------------------------------------------------------------------
# finite-difference verification

LossFn = Callable[[Params, TransitionBatch], tuple[float, list[np.ndarray]]]


def default_loss_fns(gamma: float = 0.99, expectile: float = 0.7, beta: float = 3.0, clip: float = 100.0) -> dict[str, tuple[str, LossFn]]:
    return {
        "v_loss": ("v_net", lambda p, b: v_loss(p, b, expectile)),
        "q_loss": ("q_net", lambda p, b: q_loss(p, b, gamma)),
        "policy_loss": ("policy_net", lambda p, b: policy_loss(p, b, beta, clip)),
    }


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero
    coordinates from dividing finite-difference round-off by zero."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(
    params: Params,
    batch: TransitionBatch,
    eps: float = 1e-4,
    *,
    coords_per_net: int = 200,
    rng: np.random.Generator | None = None,
    loss_fns: dict[str, tuple[str, LossFn]] | None = None,
    report: dict | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``coords_per_net`` weight coordinates are sampled from each trained
    network. ``report``, if given, receives the per-loss maxima.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    loss_fns = loss_fns or default_loss_fns()
    worst = 0.0
    for name, (net_name, fn) in loss_fns.items():
        net: MLP = getattr(params, net_name)
        _, grads = fn(params, batch)
        analytic = np.concatenate([g.ravel() for g in grads])
        base = net.flat()
        coords = rng.choice(base.size, size=min(coords_per_net, base.size), replace=False)
        numeric = np.empty(len(coords))
        for j, c in enumerate(coords):
            vec = base.copy()
            vec[c] = base[c] + eps
            net.set_flat(vec)
            up = fn(params, batch)[0]
            vec[c] = base[c] - eps
            net.set_flat(vec)
            down = fn(params, batch)[0]
            numeric[j] = (up - down) / (2 * eps)
        net.set_flat(base)
        err = float(relative_error(analytic[coords], numeric).max())
        if report is not None:
            report[name] = err
        worst = max(worst, err)
    return worst
