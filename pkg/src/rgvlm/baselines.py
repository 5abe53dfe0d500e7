"""Comparison labelers: sparse terminal reward, per-frame goal similarity and
sequence-level goal similarity.

The similarity labelers work with any :class:`EmbeddingProvider`. The
bundled :class:`StubEmbedder` is a deterministic stand-in for a real
image/text encoder: it reads the progress strip drawn by ``env.render`` and
places it along a direction that every instruction embedding shares, so
cosine similarity grows with the number of completed sub-tasks.
"""

from __future__ import annotations

import hashlib
import re
from typing import Protocol, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .dataset import Instruction, RewardLabelSet, Trajectory
from .env import RGB, GridState, render


class EmbeddingProvider(Protocol):
    dim: int

    def embed_text(self, text: str) -> np.ndarray: ...

    def embed_image(self, image: np.ndarray) -> np.ndarray: ...


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _hash_seed(data: bytes) -> int:
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "little")


class StubEmbedder:
    """Hash-based embeddings on the unit sphere of dimension ``dim``.

    Layout: coordinate 0 is a constant, coordinate 1 carries progress
    (completed sub-tasks read off the image; a fixed weight for text), the
    next block holds a hash of the scene pixels, and the last block a hash
    of the instruction's token multiset. Scene and token blocks never
    overlap, so only coordinates 0 and 1 drive image/text cosine.
    """

    PROGRESS_WEIGHT = 4.0
    SCENE_NORM = 1.0

    def __init__(self, dim: int = 64):
        if dim < 8:
            raise ValueError(f"dim must be >= 8, got {dim}")
        self.dim = int(dim)
        split = 2 + (self.dim - 2) // 2
        self._scene = slice(2, split)
        self._tokens = slice(split, self.dim)

    def embed_text(self, text: str | Instruction) -> np.ndarray:
        text = text.text if isinstance(text, Instruction) else str(text)
        v = np.zeros(self.dim)
        v[0] = 1.0
        v[1] = self.PROGRESS_WEIGHT
        width = self._tokens.stop - self._tokens.start
        counts = np.zeros(width)
        for tok in re.findall(r"[a-z]+", text.lower()):
            counts[_hash_seed(tok.encode()) % width] += 1.0
        if counts.any():
            v[self._tokens] = _unit(counts)
        return _unit(v)

    @staticmethod
    def progress_of(image: np.ndarray) -> int:
        """Completed sub-tasks encoded in the magenta strip along the bottom
        edge (two base pixels per sub-task, scaled with the tile)."""
        magenta = np.all(image == RGB["progress"], axis=-1)
        scale = 0
        while scale < magenta.shape[0] and magenta[-1 - scale, 0]:
            scale += 1
        if scale == 0:
            return 0
        return int(magenta[-1].sum()) // (2 * scale)

    def embed_image(self, image: np.ndarray | GridState) -> np.ndarray:
        if isinstance(image, GridState):
            image = render(image)
        image = np.ascontiguousarray(image, dtype=np.uint8)
        v = np.zeros(self.dim)
        v[0] = 1.0
        v[1] = float(self.progress_of(image))
        width = self._scene.stop - self._scene.start
        rng = np.random.default_rng(_hash_seed(image.tobytes()))
        v[self._scene] = self.SCENE_NORM * _unit(rng.standard_normal(width))
        return _unit(v)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def _goal(trajectory: Trajectory, goal) -> str:
    if goal is None:
        return trajectory.instruction.text
    return goal.text if isinstance(goal, Instruction) else str(goal)


def _nonempty(trajectory: Trajectory) -> None:
    if len(trajectory) == 0:
        raise ValueError(f"trajectory {trajectory.id!r} has no transitions")


def _check_dims(provider: EmbeddingProvider, vec: np.ndarray) -> np.ndarray:
    if vec.shape != (provider.dim,):
        raise ValueError(f"provider returned shape {vec.shape}, expected ({provider.dim},)")
    return vec


def sparse_labels(trajectory: Trajectory) -> RewardLabelSet:
    _nonempty(trajectory)
    rewards = [0.0] * len(trajectory)
    rewards[-1] = 1.0
    return RewardLabelSet(trajectory.id, tuple(rewards), "sparse")


def frame_similarity_labels(provider: EmbeddingProvider, trajectory: Trajectory, goal=None) -> RewardLabelSet:
    """``(cos(image of next_state_t, goal) + 1) / 2`` per transition."""
    _nonempty(trajectory)
    text = _check_dims(provider, provider.embed_text(_goal(trajectory, goal)))
    rewards = []
    for state in trajectory.states[1:]:
        img = _check_dims(provider, provider.embed_image(render(state)))
        rewards.append(float(np.clip((cosine(img, text) + 1.0) / 2.0, 0.0, 1.0)))
    return RewardLabelSet(trajectory.id, tuple(rewards), "frame_sim")


def sequence_similarity_labels(provider: EmbeddingProvider, trajectory: Trajectory, goal=None) -> RewardLabelSet:
    """One clip-level score from mean-pooled frame embeddings, placed on the
    final transition; all earlier transitions get 0."""
    _nonempty(trajectory)
    text = _check_dims(provider, provider.embed_text(_goal(trajectory, goal)))
    frames = np.stack([_check_dims(provider, provider.embed_image(render(s))) for s in trajectory.states])
    score = float(np.clip((cosine(frames.mean(axis=0), text) + 1.0) / 2.0, 0.0, 1.0))
    rewards = [0.0] * len(trajectory)
    rewards[-1] = score
    return RewardLabelSet(trajectory.id, tuple(rewards), "seq_sim")


class _Labeler(TransformerMixin, BaseEstimator):
    def fit(self, X: Sequence[Trajectory], y=None):
        return self

    def transform(self, X: Sequence[Trajectory]) -> list[RewardLabelSet]:
        return [self._label(t) for t in X]


class SparseLabeler(_Labeler):
    def _label(self, trajectory: Trajectory) -> RewardLabelSet:
        return sparse_labels(trajectory)


class FrameSimilarityLabeler(_Labeler):
    def __init__(self, provider: EmbeddingProvider | None = None):
        self.provider = provider

    def _label(self, trajectory: Trajectory) -> RewardLabelSet:
        return frame_similarity_labels(self.provider or StubEmbedder(), trajectory)


class SequenceSimilarityLabeler(_Labeler):
    def __init__(self, provider: EmbeddingProvider | None = None):
        self.provider = provider

    def _label(self, trajectory: Trajectory) -> RewardLabelSet:
        return sequence_similarity_labels(self.provider or StubEmbedder(), trajectory)
