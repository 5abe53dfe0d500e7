"""Offline trajectories, reward labels, and batch sampling.

On disk a dataset is a directory::

    manifest.json          {schema_version, count, ids, env_config, generator_seed}
    trajectories.jsonl     one trajectory per line
    labels/<source>.jsonl  one RewardLabelSet per line
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Iterator, Sequence

import numpy as np

if TYPE_CHECKING:
    from .env import GridState
    from .features import FeatureEncoder

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"
TRAJECTORIES = "trajectories.jsonl"
LABELS_DIR = "labels"

LABEL_SOURCES = ("sparse", "oracle", "lvlm", "frame_sim", "seq_sim", "combined")
UNIT_INTERVAL_SOURCES = frozenset(LABEL_SOURCES) - {"combined"}


class DatasetError(ValueError):
    pass


class DuplicateIdError(DatasetError):
    pass


class SchemaVersionError(DatasetError):
    pass


class CorruptDatasetError(DatasetError):
    pass


class LabelMismatchError(DatasetError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class Instruction:
    text: str
    task_id: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("instruction text must be non-empty")


@dataclass(frozen=True)
class Transition:
    state: "GridState"
    action: int
    next_state: "GridState"


@dataclass(frozen=True)
class Trajectory:
    """``states`` has one more entry than ``actions``; transition ``t`` is
    ``(states[t], actions[t], states[t + 1])``."""

    id: str
    states: tuple
    actions: tuple[int, ...]
    instruction: Instruction
    meta: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if not self.actions:
            raise ValueError(f"trajectory {self.id!r} has no transitions")
        if len(self.states) != len(self.actions) + 1:
            raise ValueError(
                f"trajectory {self.id!r}: {len(self.states)} states for {len(self.actions)} actions"
            )

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def transitions(self) -> list[Transition]:
        return [Transition(self.states[t], a, self.states[t + 1]) for t, a in enumerate(self.actions)]

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "instruction": {"text": self.instruction.text, "task_id": self.instruction.task_id},
            "states": [s.to_dict() for s in self.states],
            "actions": [int(a) for a in self.actions],
            "meta": self.meta,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Trajectory":
        from .env import GridState

        return cls(
            id=rec["id"],
            states=tuple(GridState.from_dict(s) for s in rec["states"]),
            actions=tuple(int(a) for a in rec["actions"]),
            instruction=Instruction(rec["instruction"]["text"], rec["instruction"]["task_id"]),
            meta=dict(rec["meta"]),
        )


@dataclass(frozen=True)
class RewardLabelSet:
    trajectory_id: str
    rewards: tuple[float, ...]
    source: str

    def __post_init__(self):
        if self.source not in LABEL_SOURCES:
            raise ValueError(f"unknown label source {self.source!r}")
        object.__setattr__(self, "rewards", tuple(float(r) for r in self.rewards))
        if any(not np.isfinite(r) or r < 0 for r in self.rewards):
            raise ValueError(f"{self.trajectory_id}: rewards must be finite and non-negative")
        if self.source in UNIT_INTERVAL_SOURCES and any(r > 1.0 for r in self.rewards):
            raise ValueError(f"{self.trajectory_id}: {self.source} rewards must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.rewards)

    def to_record(self) -> dict:
        return {"trajectory_id": self.trajectory_id, "source": self.source, "rewards": list(self.rewards)}

    @classmethod
    def from_record(cls, rec: dict) -> "RewardLabelSet":
        return cls(rec["trajectory_id"], tuple(rec["rewards"]), rec["source"])


# ---------------------------------------------------------------------------
# persistence


def write_dataset(
    trajectories: Sequence[Trajectory],
    directory: str | os.PathLike,
    env_config: dict | None = None,
    generator_seed: int = 0,
) -> None:
    seen: set[str] = set()
    for traj in trajectories:
        if traj.id in seen:
            raise DuplicateIdError(f"duplicate trajectory id {traj.id!r}")
        seen.add(traj.id)
    path = Path(directory)
    path.mkdir(parents=False, exist_ok=True)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "count": len(trajectories),
        "ids": [t.id for t in trajectories],
        "env_config": env_config or {},
        "generator_seed": int(generator_seed),
    }
    with open(path / TRAJECTORIES, "w", encoding="utf-8", newline="\n") as fh:
        for traj in trajectories:
            fh.write(_dumps(traj.to_record()) + "\n")
    (path / MANIFEST).write_text(_dumps(manifest) + "\n", encoding="utf-8")


def read_manifest(directory: str | os.PathLike) -> dict:
    path = Path(directory) / MANIFEST
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CorruptDatasetError(f"missing manifest: {path}") from None
    except json.JSONDecodeError as exc:
        raise CorruptDatasetError(f"corrupt manifest {path}: {exc}") from None
    if not isinstance(manifest, dict) or "schema_version" not in manifest:
        raise CorruptDatasetError(f"corrupt manifest {path}: no schema_version")
    if manifest["schema_version"] != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"schema version {manifest['schema_version']!r} not supported (expected {SCHEMA_VERSION})"
        )
    return manifest


def _iter_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptDatasetError(f"{path.name} line {lineno}: {exc.msg}") from None


def read_dataset(directory: str | os.PathLike) -> list[Trajectory]:
    path = Path(directory)
    manifest = read_manifest(path)
    trajectories = []
    for lineno, rec in _iter_jsonl(path / TRAJECTORIES):
        try:
            trajectories.append(Trajectory.from_record(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptDatasetError(f"{TRAJECTORIES} line {lineno}: {exc!r}") from None
    ids = [t.id for t in trajectories]
    if manifest["count"] != len(trajectories) or manifest["ids"] != ids:
        raise CorruptDatasetError(
            f"manifest lists {manifest['count']} trajectories, {TRAJECTORIES} holds {len(trajectories)}"
        )
    return trajectories


def labels_path(directory: str | os.PathLike, source: str) -> Path:
    if source not in LABEL_SOURCES:
        raise ValueError(f"unknown label source {source!r}")
    return Path(directory) / LABELS_DIR / f"{source}.jsonl"


def write_labels(directory: str | os.PathLike, labels: Iterable[RewardLabelSet], source: str) -> Path:
    out = labels_path(directory, source)
    out.parent.mkdir(exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for ls in labels:
            fh.write(_dumps(ls.to_record()) + "\n")
    return out


def append_label(directory: str | os.PathLike, label: RewardLabelSet) -> None:
    out = labels_path(directory, label.source)
    out.parent.mkdir(exist_ok=True)
    with open(out, "a", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(label.to_record()) + "\n")
        fh.flush()


def read_labels(directory: str | os.PathLike, source: str) -> list[RewardLabelSet]:
    path = labels_path(directory, source)
    if not path.exists():
        raise FileNotFoundError(f"no {source} labels at {path}")
    out = []
    for lineno, rec in _iter_jsonl(path):
        try:
            out.append(RewardLabelSet.from_record(rec))
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptDatasetError(f"{path.name} line {lineno}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# labelled transitions


@dataclass(frozen=True)
class LabeledDataset:
    """Flat, immutable view pairing every transition with its reward."""

    trajectory_ids: tuple[str, ...]
    step_index: np.ndarray
    states: tuple
    actions: np.ndarray
    next_states: tuple
    rewards: np.ndarray
    dones: np.ndarray
    instructions: tuple[Instruction, ...]
    source: str = "sparse"

    def __len__(self) -> int:
        return len(self.actions)

    def __post_init__(self):
        for arr in (self.step_index, self.actions, self.rewards, self.dones):
            arr.setflags(write=False)


def attach_labels(dataset: Sequence[Trajectory], labels: Sequence[RewardLabelSet]) -> LabeledDataset:
    by_id: dict[str, RewardLabelSet] = {}
    known = {t.id for t in dataset}
    for ls in labels:
        if ls.trajectory_id not in known:
            raise LabelMismatchError(f"label set for unknown trajectory {ls.trajectory_id!r}")
        if ls.trajectory_id in by_id:
            raise LabelMismatchError(f"multiple label sets for trajectory {ls.trajectory_id!r}")
        by_id[ls.trajectory_id] = ls
    sources = {ls.source for ls in labels}
    ids, steps, states, actions, nexts, rewards, dones, instrs = [], [], [], [], [], [], [], []
    for traj in dataset:
        ls = by_id.get(traj.id)
        if ls is None:
            raise LabelMismatchError(f"no label set for trajectory {traj.id!r}")
        if len(ls) != len(traj):
            raise LabelMismatchError(
                f"trajectory {traj.id!r}: {len(ls)} rewards for {len(traj)} transitions"
            )
        T = len(traj)
        for t in range(T):
            ids.append(traj.id)
            steps.append(t)
            states.append(traj.states[t])
            actions.append(traj.actions[t])
            nexts.append(traj.states[t + 1])
            rewards.append(ls.rewards[t])
            dones.append(t == T - 1)
            instrs.append(traj.instruction)
    return LabeledDataset(
        trajectory_ids=tuple(ids),
        step_index=np.asarray(steps, dtype=np.int64),
        states=tuple(states),
        actions=np.asarray(actions, dtype=np.int64),
        next_states=tuple(nexts),
        rewards=np.asarray(rewards, dtype=np.float64),
        dones=np.asarray(dones, dtype=bool),
        instructions=tuple(instrs),
        source=sources.pop() if len(sources) == 1 else "mixed",
    )


@dataclass(frozen=True)
class TransitionBatch:
    """Parallel arrays for one training batch.

    ``observations``/``next_observations`` are the joint state-and-instruction
    encodings (dense arrays or scipy sparse rows).
    """

    indices: np.ndarray
    observations: object
    actions: np.ndarray
    next_observations: object
    rewards: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class EncodedDataset:
    observations: object
    next_observations: object
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


def encode_dataset(labeled: LabeledDataset, encoder: "FeatureEncoder") -> EncodedDataset:
    obs = encoder.encode_many(labeled.states, labeled.instructions)
    nxt = encoder.encode_many(labeled.next_states, labeled.instructions)
    return EncodedDataset(obs, nxt, labeled.actions, labeled.rewards, labeled.dones)


def sample_indices(size: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if size == 0:
        raise DatasetError("cannot sample from an empty dataset")
    if n < 1:
        raise ValueError(f"batch size must be >= 1, got {n}")
    return rng.integers(0, size, size=n)


def sample_batch(
    labeled: LabeledDataset | EncodedDataset,
    n: int,
    rng: np.random.Generator,
    encoder: "FeatureEncoder | None" = None,
) -> TransitionBatch:
    """Draw ``n`` transitions uniformly with replacement."""
    idx = sample_indices(len(labeled), n, rng)
    if isinstance(labeled, EncodedDataset):
        enc = labeled
        return TransitionBatch(
            idx, enc.observations[idx], enc.actions[idx], enc.next_observations[idx], enc.rewards[idx], enc.dones[idx]
        )
    if encoder is None:
        from .features import FeatureEncoder

        encoder = FeatureEncoder()
    instrs = [labeled.instructions[i] for i in idx]
    return TransitionBatch(
        idx,
        encoder.encode_many([labeled.states[i] for i in idx], instrs),
        labeled.actions[idx],
        encoder.encode_many([labeled.next_states[i] for i in idx], instrs),
        labeled.rewards[idx],
        labeled.dones[idx],
    )
