"""Estimator wrapper around the IQL learner, with artifact persistence."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator

from .._validation import check_choice, check_int, check_is_fitted, check_real
from ..dataset import (
    EncodedDataset,
    Instruction,
    LabeledDataset,
    RewardLabelSet,
    Trajectory,
    TransitionBatch,
    attach_labels,
    encode_dataset,
    sample_indices,
)
from ..env import NUM_ACTIONS, EnvConfig, GridState
from ..features import FeatureEncoder
from .losses import (
    Params,
    _policy_loss_from,
    _q_loss_from,
    _taken,
    _v_loss_from,
    awr_weights,
    init_params,
    log_softmax,
)
from ._fused import PackedNets, gather_rows, packable
from ._kernels import polyak_inplace
from .nets import MLP, Adam

ARTIFACT_MAGIC = b"RGVLMPOL"
ARTIFACT_VERSION = 1
_NET_ORDER = ("v_net", "q_net", "q_target", "policy_net")


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, metrics: dict | None = None):
        super().__init__(message)
        self.metrics = metrics or {}


class ArtifactError(ValueError):
    pass


class ChecksumError(ArtifactError):
    pass


@dataclass(frozen=True)
class Hyper:
    gamma: float = 0.99
    q_expectile: float = 0.7
    beta: float = 3.0
    polyak_tau: float = 0.005
    learning_rate: float = 3e-4
    batch_size: int = 256
    updates: int = 50_000
    awr_weight_clip: float = 100.0
    seed: int = 0

    def __post_init__(self):
        check_real("gamma", self.gamma, low=0.0, high=1.0, high_open=True)
        check_real("q_expectile", self.q_expectile, low=0.5, high=1.0, high_open=True)
        check_real("beta", self.beta, low=0.0, low_open=True)
        check_real("polyak_tau", self.polyak_tau, low=0.0, high=1.0, low_open=True)
        check_real("learning_rate", self.learning_rate, low=0.0, low_open=True)
        check_int("batch_size", self.batch_size, min_value=1)
        check_int("updates", self.updates, min_value=0)
        check_real("awr_weight_clip", self.awr_weight_clip, low=0.0, low_open=True)
        check_int("seed", self.seed)


class IQLLearner:
    """Owns the four networks and their optimisers; one call = one update."""

    def __init__(self, params: Params, hyper: Hyper):
        self.params = params
        self.hyper = hyper
        self.opt_v = Adam(params.v_net.params, hyper.learning_rate)
        self.opt_q = Adam(params.q_net.params, hyper.learning_rate)
        self.opt_pi = Adam(params.policy_net.params, hyper.learning_rate)

    def update(self, batch: TransitionBatch) -> dict[str, float]:
        h, p = self.hyper, self.params
        obs, actions = batch.observations, batch.actions

        qt_sa = _taken(p.q_target.forward(obs), actions)
        v_out, v_acts = p.v_net.forward(obs, keep=True)
        v_next = p.v_net.forward(batch.next_observations)[:, 0]
        target = batch.rewards + h.gamma * np.where(batch.dones, 0.0, v_next)
        q_out, q_acts = p.q_net.forward(obs, keep=True)
        logits, pi_acts = p.policy_net.forward(obs, keep=True)

        adv = qt_sa - v_out[:, 0]
        lv, gv = _v_loss_from(v_out, v_acts, qt_sa, h.q_expectile, p.v_net)
        lq, gq = _q_loss_from(q_out, q_acts, actions, target, p.q_net)
        lpi, gpi = _policy_loss_from(logits, pi_acts, actions, awr_weights(adv, h.beta, h.awr_weight_clip), p.policy_net)
        metrics = {"v_loss": lv, "q_loss": lq, "policy_loss": lpi, "mean_advantage": float(adv.mean())}
        if not all(np.isfinite(list(metrics.values()))):
            raise DivergenceError(f"non-finite loss: {metrics}", metrics)

        self.opt_v.step(p.v_net.params, gv)
        self.opt_q.step(p.q_net.params, gq)
        self.opt_pi.step(p.policy_net.params, gpi)
        polyak_update(p.q_target, p.q_net, h.polyak_tau)
        return metrics


def _batch_at(enc: EncodedDataset, idx: np.ndarray) -> TransitionBatch:
    return TransitionBatch(idx, enc.observations[idx], enc.actions[idx], enc.next_observations[idx], enc.rewards[idx], enc.dones[idx])


class _PackedStep:
    """Batch gather plus packed update; raises on a non-finite step."""

    def __init__(self, nets: PackedNets, encoded: EncodedDataset, hyper: Hyper):
        self.nets, self.hyper = nets, hyper
        dt = nets.dtype
        self.obs = _csr_parts(encoded.observations, dt)
        self.next_obs = _csr_parts(encoded.next_observations, dt)
        self.actions, self.rewards, self.dones = encoded.actions, encoded.rewards, encoded.dones

    def __call__(self, idx: np.ndarray) -> dict[str, float]:
        metrics, applied = self.nets.update(
            gather_rows(*self.obs, idx),
            gather_rows(*self.next_obs, idx),
            self.actions[idx],
            self.rewards[idx],
            self.dones[idx],
            self.hyper,
        )
        if not applied:
            raise DivergenceError(f"non-finite loss: {metrics}", metrics)
        return metrics


def _csr_parts(x, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = sp.csr_matrix(x)
    return x.indptr, x.indices, x.data.astype(dtype)


def polyak_update(target: MLP, source: MLP, tau: float) -> None:
    """``target <- (1 - tau) * target + tau * source``, in place."""
    for t, s in zip(target.params, source.params):
        polyak_inplace(t, s, tau)


def update_step(learner: IQLLearner, batch: TransitionBatch) -> dict[str, float]:
    """One gradient step on V, Q and the policy followed by the target-network update."""
    return learner.update(batch)


class IQLPolicy(BaseEstimator):
    """Language-conditioned implicit Q-learning.

    ``fit`` takes either a :class:`LabeledDataset` or trajectories plus
    their reward label sets; ``predict`` returns greedy actions for
    ``(state, instruction)`` pairs.
    """

    def __init__(
        self,
        gamma: float = 0.99,
        expectile: float = 0.7,
        beta: float = 3.0,
        polyak_tau: float = 0.005,
        learning_rate: float = 3e-4,
        batch_size: int = 256,
        updates: int = 50_000,
        awr_weight_clip: float = 100.0,
        hidden_sizes: tuple[int, ...] = (128, 128),
        seed: int = 0,
        log_every: int = 1000,
        precision: str = "float32",
    ):
        self.gamma = gamma
        self.expectile = expectile
        self.beta = beta
        self.polyak_tau = polyak_tau
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.updates = updates
        self.awr_weight_clip = awr_weight_clip
        self.hidden_sizes = hidden_sizes
        self.seed = seed
        self.log_every = log_every
        self.precision = precision

    @property
    def hyper(self) -> Hyper:
        return Hyper(
            gamma=self.gamma,
            q_expectile=self.expectile,
            beta=self.beta,
            polyak_tau=self.polyak_tau,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            updates=self.updates,
            awr_weight_clip=self.awr_weight_clip,
            seed=self.seed,
        )

    @classmethod
    def from_hyper(cls, hyper: Hyper, **kwargs) -> "IQLPolicy":
        return cls(
            gamma=hyper.gamma,
            expectile=hyper.q_expectile,
            beta=hyper.beta,
            polyak_tau=hyper.polyak_tau,
            learning_rate=hyper.learning_rate,
            batch_size=hyper.batch_size,
            updates=hyper.updates,
            awr_weight_clip=hyper.awr_weight_clip,
            seed=hyper.seed,
            **kwargs,
        )

    def _init(self, encoder: FeatureEncoder) -> tuple[Params, np.random.Generator]:
        for h in self.hidden_sizes:
            check_int("hidden size", h, min_value=1)
        init_rng, batch_rng = np.random.default_rng(self.seed).spawn(2)
        params = init_params(encoder.dim, NUM_ACTIONS, tuple(self.hidden_sizes), init_rng)
        return params, batch_rng

    def _stepper(self, params: Params, encoded: EncodedDataset, hyper: Hyper):
        check_choice("precision", self.precision, ("float32", "float64"))
        if packable(params):
            nets = PackedNets(params, np.dtype(self.precision), lr=hyper.learning_rate)
            return _PackedStep(nets, encoded, hyper)
        if self.precision != "float64":
            raise ValueError("architectures other than two equal hidden layers train in float64 only")
        learner = IQLLearner(params, hyper)
        return lambda idx: learner.update(_batch_at(encoded, idx))

    def fit(
        self,
        X: LabeledDataset | Sequence[Trajectory],
        y: Sequence[RewardLabelSet] | None = None,
        callback: Callable[[int, dict], None] | None = None,
    ) -> "IQLPolicy":
        hyper = self.hyper
        check_int("log_every", self.log_every, min_value=1)
        labeled = X if isinstance(X, LabeledDataset) else attach_labels(X, y or [])
        if len(labeled) == 0:
            raise ValueError("cannot fit on an empty dataset")
        first = labeled.states[0]
        encoder = FeatureEncoder(EnvConfig(width=first.width, height=first.height, object_count=1))
        params, batch_rng = self._init(encoder)
        encoded: EncodedDataset = encode_dataset(labeled, encoder)
        step = self._stepper(params, encoded, hyper)
        metrics_log: list[dict] = []
        for i in range(1, hyper.updates + 1):
            idx = sample_indices(len(encoded), hyper.batch_size, batch_rng)
            try:
                m = step(idx)
            except DivergenceError as exc:
                exc.metrics = {"update": i, **exc.metrics}
                self.metrics_ = metrics_log
                raise
            if i % self.log_every == 0 or i == hyper.updates:
                row = {"update": i, **m}
                metrics_log.append(row)
                if callback is not None:
                    callback(i, row)
        if isinstance(step, _PackedStep) and hyper.updates > 0:
            params = step.nets.to_params()
        self.params_ = params
        self.encoder_ = encoder
        self.metrics_ = metrics_log
        self.label_source_ = labeled.source
        return self

    # -- inference ---------------------------------------------------------

    def _logits(self, states: Sequence[GridState], instructions: Sequence[Instruction | str]) -> np.ndarray:
        check_is_fitted(self)
        return self.params_.policy_net.forward(self.encoder_.encode_many(states, instructions))

    def predict_proba(self, states: Sequence[GridState], instructions: Sequence[Instruction | str]) -> np.ndarray:
        return np.exp(log_softmax(self._logits(states, instructions)))

    def predict(self, states: Sequence[GridState], instructions: Sequence[Instruction | str]) -> np.ndarray:
        return np.argmax(self._logits(states, instructions), axis=1)

    def act(self, state: GridState, instruction: Instruction | str, mode: str = "greedy", rng=None) -> int:
        logits = self._logits([state], [instruction])[0]
        return select_action(logits, mode, rng)

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path) -> Path:
        check_is_fitted(self)
        payload = b"".join(
            getattr(self.params_, name).flat().astype("<f8").tobytes() for name in _NET_ORDER
        )
        header = {
            "format": "rgvlm-policy",
            "version": ARTIFACT_VERSION,
            "arch": {
                "activation": "tanh",
                "nets": {name: list(getattr(self.params_, name).sizes) for name in _NET_ORDER},
            },
            "dims": {"input": self.encoder_.dim, "actions": NUM_ACTIONS},
            "vocab": list(self.encoder_.vocab),
            "env_config": self.encoder_.env_config.to_dict(),
            "absolute_features": self.encoder_.absolute,
            "hyper": asdict(self.hyper),
            "estimator": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()},
            "seed": self.seed,
            "label_source": getattr(self, "label_source_", None),
            "checksum": hashlib.sha256(payload).hexdigest(),
            "payload_bytes": len(payload),
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        path = Path(path)
        path.write_bytes(ARTIFACT_MAGIC + struct.pack("<I", len(blob)) + blob + payload)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "IQLPolicy":
        raw = Path(path).read_bytes()
        if raw[: len(ARTIFACT_MAGIC)] != ARTIFACT_MAGIC:
            raise ArtifactError(f"{path}: not a policy artifact")
        off = len(ARTIFACT_MAGIC)
        try:
            (n,) = struct.unpack("<I", raw[off : off + 4])
            header = json.loads(raw[off + 4 : off + 4 + n])
        except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ArtifactError(f"{path}: unreadable header ({exc})") from None
        if header.get("version") != ARTIFACT_VERSION:
            raise ArtifactError(f"{path}: unsupported artifact version {header.get('version')!r}")
        payload = raw[off + 4 + n :]
        if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["checksum"]:
            raise ChecksumError(f"{path}: checksum mismatch; artifact is corrupted")
        params = dict(header["estimator"])
        params["hidden_sizes"] = tuple(params["hidden_sizes"])
        est = cls(**params)
        weights = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        nets, pos = {}, 0
        for name in _NET_ORDER:
            sizes = header["arch"]["nets"][name]
            net = MLP(sizes, np.random.default_rng(0))
            count = net.num_params()
            net.set_flat(weights[pos : pos + count])
            pos += count
            nets[name] = net
        est.params_ = Params(**nets)
        est.encoder_ = FeatureEncoder(
            EnvConfig.from_dict(header["env_config"]), header["vocab"], header.get("absolute_features", False)
        )
        est.metrics_ = []
        est.label_source_ = header.get("label_source")
        return est


def select_action(logits: np.ndarray, mode: str = "greedy", rng=None) -> int:
    """Greedy picks the lowest index among tied maxima; sample draws from the softmax."""
    if mode == "greedy":
        return int(np.argmax(logits))
    if mode != "sample":
        raise ValueError(f"mode must be 'greedy' or 'sample', got {mode!r}")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    probs = np.exp(log_softmax(np.asarray(logits, dtype=np.float64)))
    return int(gen.choice(len(probs), p=probs / probs.sum()))


def train(labeled: LabeledDataset, hyper: Hyper, **kwargs) -> IQLPolicy:
    return IQLPolicy.from_hyper(hyper, **kwargs).fit(labeled)
