from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rgvlm import dataset, env
from rgvlm.dataset import (
    CorruptDatasetError,
    DuplicateIdError,
    LabelMismatchError,
    RewardLabelSet,
    SchemaVersionError,
    attach_labels,
    read_dataset,
    read_labels,
    write_dataset,
    write_labels,
)

from conftest import oracle_labels


def test_roundtrip_and_layout(tmp_path, rollouts):
    trajs = [t for _, t in rollouts]
    out = tmp_path / "ds"
    write_dataset(trajs, out, env_config=env.EnvConfig().to_dict(), generator_seed=3)
    assert read_dataset(out) == trajs
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["schema_version"] == 1
    assert manifest["count"] == len(trajs)
    assert manifest["ids"] == [t.id for t in trajs]
    assert manifest["generator_seed"] == 3
    lines = (out / "trajectories.jsonl").read_text().splitlines()
    rec = json.loads(lines[0])
    assert set(rec) == {"id", "instruction", "states", "actions", "meta"}
    assert set(rec["meta"]) == {"seed", "num_subtasks", "suboptimality"}


def test_duplicate_ids_rejected(tmp_path, rollouts):
    t = rollouts[0][1]
    with pytest.raises(DuplicateIdError):
        write_dataset([t, t], tmp_path / "ds")


def test_schema_version_checked(tmp_path, rollouts):
    out = tmp_path / "ds"
    write_dataset([rollouts[0][1]], out)
    m = json.loads((out / "manifest.json").read_text())
    m["schema_version"] = 99
    (out / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(SchemaVersionError):
        read_dataset(out)


def test_corrupt_line_reported(tmp_path, rollouts):
    out = tmp_path / "ds"
    write_dataset([t for _, t in rollouts[:3]], out)
    path = out / "trajectories.jsonl"
    lines = path.read_text().splitlines()
    lines[1] = lines[1][:40]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorruptDatasetError, match="line 2"):
        read_dataset(out)


def test_labels_roundtrip(tmp_path, rollouts):
    out = tmp_path / "ds"
    trajs = [t for _, t in rollouts]
    write_dataset(trajs, out)
    labels = [oracle_labels(task, t) for task, t in rollouts]
    write_labels(out, labels, "oracle")
    assert read_labels(out, "oracle") == labels
    with pytest.raises(FileNotFoundError):
        read_labels(out, "sparse")


def test_label_validation():
    with pytest.raises(ValueError):
        RewardLabelSet("a", (0.5,), "bogus")
    with pytest.raises(ValueError):
        RewardLabelSet("a", (1.5,), "oracle")
    with pytest.raises(ValueError):
        RewardLabelSet("a", (float("nan"),), "sparse")
    assert RewardLabelSet("a", (0.2, 1.7), "combined").rewards == (0.2, 1.7)


def test_attach_mismatches(rollouts):
    task, traj = rollouts[0]
    lab = oracle_labels(task, traj)
    with pytest.raises(LabelMismatchError):
        attach_labels([traj], [RewardLabelSet(traj.id, lab.rewards[:-1], "oracle")])
    with pytest.raises(LabelMismatchError):
        attach_labels([traj], [])
    with pytest.raises(LabelMismatchError):
        attach_labels([traj], [lab, lab])
    with pytest.raises(LabelMismatchError):
        attach_labels([traj], [RewardLabelSet("ghost", lab.rewards, "oracle")])


def test_sample_indices_deterministic():
    a = dataset.sample_indices(100, 256, np.random.default_rng(0))
    b = dataset.sample_indices(100, 256, np.random.default_rng(0))
    assert np.array_equal(a, b) and a.min() >= 0 and a.max() < 100
    with pytest.raises(ValueError):
        dataset.sample_indices(0, 4, np.random.default_rng(0))


_POOL = [(env.generate_task(s, 1 + s % 6), s) for s in range(30)]


@st.composite
def trajectory_sets(draw):
    picks = draw(st.lists(st.integers(0, len(_POOL) - 1), min_size=1, max_size=4))
    subopt = draw(st.sampled_from([0.0, 0.25, 0.5]))
    trajs = []
    for k, p in enumerate(picks):
        task, s = _POOL[p]
        traj = env.scripted_rollout(task, subopt, draw(st.integers(0, 50)), trajectory_id=f"t{k}-{p}")
        trajs.append((task, traj))
    return trajs


def check_roundtrip_and_attach(tmp_path_factory, trajs, scale):
    out = tmp_path_factory.mktemp("prop") / "ds"
    plain = [t for _, t in trajs]
    write_dataset(plain, out)
    back = read_dataset(out)
    assert back == plain
    labels = [RewardLabelSet(t.id, tuple(min(1.0, r * scale) for r in env.rollout_rewards(task, t)), "oracle") for task, t in trajs]
    write_labels(out, labels, "oracle")
    labeled = attach_labels(back, read_labels(out, "oracle"))
    assert len(labeled) == sum(len(t) for t in plain)
    pos = 0
    for t, lab in zip(plain, labels):
        n = len(t)
        assert labeled.trajectory_ids[pos : pos + n] == (t.id,) * n
        assert list(labeled.step_index[pos : pos + n]) == list(range(n))
        assert list(labeled.actions[pos : pos + n]) == list(t.actions)
        assert tuple(labeled.rewards[pos : pos + n]) == lab.rewards
        assert list(labeled.dones[pos : pos + n]) == [False] * (n - 1) + [True]
        assert labeled.states[pos : pos + n] == t.states[:-1]
        assert labeled.next_states[pos : pos + n] == t.states[1:]
        pos += n


@settings(max_examples=1000, deadline=None)
@given(trajs=trajectory_sets(), scale=st.floats(0.0, 1.0))
def test_property_roundtrip_and_attach(tmp_path_factory, trajs, scale):
    check_roundtrip_and_attach(tmp_path_factory, trajs, scale)
