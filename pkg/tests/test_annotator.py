from __future__ import annotations

import json
import math
from pathlib import Path

import httpx
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rgvlm import env
from rgvlm.annotator import (
    AnnotatorConfig,
    BackendError,
    CacheMissError,
    CachingBackend,
    ConflictingScoreError,
    GridLayoutError,
    HttpBackend,
    MissingScoreError,
    OracleBackend,
    RGVLMLabeler,
    ScoreParseError,
    ScoreRangeError,
    TransportError,
    annotate_trajectory,
    build_prompts,
    combine_with_sparse,
    compose_grid,
    format_scores,
    normalize,
    parse_scores,
    partition_windows,
)
from rgvlm.dataset import LabelMismatchError, RewardLabelSet

CORPUS = json.loads((Path(__file__).parent / "fixtures" / "parser_corpus.json").read_text())
NO_SLEEP = lambda s: None


def make_traj(length: int, seed: int = 0):
    """Scripted rollout with at least ``length`` transitions, truncated."""
    for s in range(seed, seed + 200):
        task = env.generate_task(s, 6)
        traj = env.scripted_rollout(task, 0.4, s)
        if len(traj) >= length:
            from rgvlm.dataset import Trajectory

            return task, Trajectory(traj.id, traj.states[: length + 1], traj.actions[:length], traj.instruction, traj.meta)
    raise AssertionError("no long enough rollout")


# -- windows and grids --------------------------------------------------------


@pytest.mark.parametrize("T,expected", [(16, [8, 8]), (5, [5]), (17, [8, 8, 1]), (8, [8])])
def test_partition_windows(T, expected):
    _, traj = make_traj(T)
    windows = partition_windows(traj, 8)
    assert [len(w) for w in windows] == expected
    assert [w.start_index for w in windows] == [8 * i for i in range(len(expected))]
    flat = [t for w in windows for t in w.transitions]
    assert flat == traj.transitions
    for w in windows:
        assert len(w.observations) == len(w) + 1
        assert np.array_equal(w.observations[-1], env.render(w.transitions[-1].next_state))
        assert np.array_equal(w.observations[0], env.render(w.transitions[0].state))


def test_partition_guards():
    _, traj = make_traj(3)
    with pytest.raises(ValueError):
        partition_windows(traj, 0)


@pytest.mark.parametrize("n,layout", [(9, (3, 3)), (6, (2, 3)), (2, (1, 3)), (4, (2, 3))])
def test_compose_grid_layout(n, layout):
    _, traj = make_traj(n - 1)
    win = partition_windows(traj, 8)[0]
    grid = compose_grid(win)
    assert grid.layout == layout
    assert list(grid.index_labels) == list(range(n))
    assert grid.image.dtype == np.uint8 and grid.image.ndim == 3
    assert compose_grid(win).png() == grid.png()


def test_compose_grid_too_many_tiles():
    frame = np.zeros((64, 64, 3), np.uint8)
    with pytest.raises(GridLayoutError):
        compose_grid([frame] * 10)


def test_window_size_capped():
    with pytest.raises(ValueError):
        AnnotatorConfig(window_size=9)
    with pytest.raises(ValueError):
        AnnotatorConfig(scale_max=0)


# -- prompts ---------------------------------------------------------------


def test_build_prompts():
    _, traj = make_traj(3)
    win = partition_windows(traj, 8)[0]
    grid = compose_grid(win)
    bundle = build_prompts(win, grid, "pick up the red key")
    assert bundle.expected_scores == 3
    assert "pick up the red key" in bundle.stage1_text
    for i, a in enumerate(win.actions):
        assert f"{i}" in bundle.stage1_text and env.ACTIONS[a] in bundle.stage1_text
    assert "0 to 10" in bundle.stage2_text
    assert "Action <i>: <score>" in bundle.stage2_text or "Action 0:" in bundle.stage2_text
    assert bundle == build_prompts(win, grid, "pick up the red key")


# -- parsing ---------------------------------------------------------------


@pytest.mark.parametrize("case", CORPUS["well_formed"], ids=lambda c: c["name"])
def test_corpus_well_formed(case):
    assert parse_scores(case["text"], case["n"]) == case["expected"]


@pytest.mark.parametrize("case", CORPUS["malformed"], ids=lambda c: c["name"])
def test_corpus_malformed(case):
    with pytest.raises(ScoreParseError) as info:
        parse_scores(case["text"], case["n"])
    assert type(info.value).__name__ == case["error"]


def test_parse_examples():
    assert parse_scores("Action 0: 3\nAction 1: 10", 2) == [3, 10]
    with pytest.raises(MissingScoreError) as info:
        parse_scores("Action 0: 3", 2)
    assert info.value.index == 1
    with pytest.raises(ScoreRangeError):
        parse_scores("Action 0: 11", 1)
    assert parse_scores("Action 0: 4\nAction 0: 4", 1) == [4]
    with pytest.raises(ConflictingScoreError):
        parse_scores("Action 0: 4\nAction 0: 5", 1)


@settings(max_examples=200, deadline=None)
@given(scores=st.lists(st.integers(0, 10), min_size=1, max_size=8))
def test_parse_format_roundtrip(scores):
    assert parse_scores(format_scores(scores), len(scores)) == scores


def test_normalize():
    assert normalize([0, 5, 10]) == [0.0, 0.5, 1.0]
    assert normalize([3], scale_max=4) == [0.75]


# -- oracle pipeline ---------------------------------------------------------


def test_oracle_exact_and_conversation_count(rollouts):
    backend = OracleBackend(0.0, tasks={t.task_id: t for t, _ in rollouts})
    for task, traj in rollouts:
        before = backend.calls
        label = annotate_trajectory(backend, traj, cfg=AnnotatorConfig(concurrency_limit=3), sleep=NO_SLEEP)
        expected = [round(10 * r) / 10 for r in env.rollout_rewards(task, traj)]
        assert list(label.rewards) == expected
        assert label.source == "oracle"
        assert backend.calls - before == 2 * math.ceil(len(traj) / 8)


def test_oracle_regenerates_task_from_meta(rollouts):
    task, traj = rollouts[3]
    label = annotate_trajectory(OracleBackend(), traj, sleep=NO_SLEEP)
    assert list(label.rewards) == [round(10 * r) / 10 for r in env.rollout_rewards(task, traj)]


def test_oracle_noise_deterministic_and_bounded(rollouts):
    _, traj = rollouts[5]
    a = annotate_trajectory(OracleBackend(2.0, seed=1), traj, sleep=NO_SLEEP)
    b = annotate_trajectory(OracleBackend(2.0, seed=1), traj, cfg=AnnotatorConfig(concurrency_limit=1), sleep=NO_SLEEP)
    c = annotate_trajectory(OracleBackend(2.0, seed=2), traj, sleep=NO_SLEEP)
    assert a == b and a != c
    assert all(0.0 <= r <= 1.0 and round(r * 10) == r * 10 for r in a.rewards)


def test_combine_with_sparse(rollouts):
    task, traj = rollouts[0]
    dense = RewardLabelSet(traj.id, tuple(env.rollout_rewards(task, traj)), "oracle")
    comb = combine_with_sparse(dense, traj)
    assert comb.source == "combined"
    assert comb.rewards[:-1] == dense.rewards[:-1]
    assert comb.rewards[-1] == dense.rewards[-1] + 1.0
    with pytest.raises(LabelMismatchError):
        combine_with_sparse(RewardLabelSet("x", dense.rewards, "oracle"), traj)
    with pytest.raises(LabelMismatchError):
        combine_with_sparse(RewardLabelSet(traj.id, dense.rewards[:-1], "oracle"), traj)


def test_labeler_estimator(rollouts):
    trajs = [t for _, t in rollouts[:3]]
    lab = RGVLMLabeler(OracleBackend(), combine=True)
    assert lab.get_params()["window_size"] == 8
    labels = lab.fit(trajs).transform(trajs)
    assert [l.source for l in labels] == ["combined"] * 3
    with pytest.raises(Exception):
        RGVLMLabeler(OracleBackend()).transform(trajs)


# -- HTTP and cache backends -------------------------------------------------


class ScriptedServer:
    """Mock transport: replies with queued (status, body) pairs, then
    falls back to answering with correct-format scores."""

    def __init__(self, queue=()):
        self.queue = list(queue)
        self.requests = []

    def __call__(self, request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        self.requests.append((request, body))
        if self.queue:
            status, payload = self.queue.pop(0)
            return httpx.Response(status, json=payload)
        last = body["messages"][-1]["content"][-1]["text"]
        if len(body["messages"]) == 1:
            return httpx.Response(200, json={"content": "The agent approaches the target."})
        n = int(last.split("exactly ")[1].split()[0])
        return httpx.Response(200, json={"content": "\n".join(f"Action {i}: 5" for i in range(n))})


def http_backend(server, key="secret"):
    return HttpBackend("http://lvlm.test/v1", api_key=key, client=httpx.Client(transport=httpx.MockTransport(server)))


def test_http_two_stage_conversation():
    _, traj = make_traj(3)
    server = ScriptedServer()
    label = annotate_trajectory(http_backend(server), traj, sleep=NO_SLEEP)
    assert label.rewards == (0.5, 0.5, 0.5) and label.source == "lvlm"
    (r1, b1), (r2, b2) = server.requests
    assert r1.url == "http://lvlm.test/v1/chat"
    assert r1.headers["Authorization"] == "Bearer secret"
    assert len(b1["messages"]) == 1
    assert len(b2["messages"]) == 3
    assert b2["messages"][1]["role"] == "assistant"
    assert b2["messages"][1]["content"][0]["text"] == "The agent approaches the target."
    assert b1["messages"][0]["content"][0]["kind"] == "image"


def test_http_500_thrice_surfaces_transport_error():
    _, traj = make_traj(3)
    server = ScriptedServer([(500, {})] * 3)
    sleeps = []
    with pytest.raises(TransportError) as info:
        annotate_trajectory(http_backend(server), traj, cfg=AnnotatorConfig(max_retries=2), sleep=sleeps.append)
    assert info.value.trajectory_id == traj.id and info.value.start_index == 0
    assert traj.id in str(info.value)
    assert len(server.requests) == 3
    assert sleeps == [1.0, 2.0]


def test_http_recovers_after_retry():
    _, traj = make_traj(2)
    server = ScriptedServer([(503, {}), (429, {})])
    label = annotate_trajectory(http_backend(server), traj, cfg=AnnotatorConfig(max_retries=2), sleep=NO_SLEEP)
    assert len(label.rewards) == 2


def test_http_client_error_not_retried():
    _, traj = make_traj(2)
    server = ScriptedServer([(401, {"error": "bad key"})])
    with pytest.raises(BackendError) as info:
        annotate_trajectory(http_backend(server), traj, sleep=NO_SLEEP)
    assert not isinstance(info.value, TransportError)
    assert info.value.status == 401 and len(server.requests) == 1


def test_http_unparseable_reply_names_window():
    _, traj = make_traj(10)
    server = ScriptedServer([(200, {"content": "ok"}), (200, {"content": "no idea"})])
    with pytest.raises(MissingScoreError) as info:
        annotate_trajectory(http_backend(server), traj, cfg=AnnotatorConfig(concurrency_limit=1), sleep=NO_SLEEP)
    assert info.value.start_index == 0 and info.value.trajectory_id == traj.id


def test_cache_cold_then_warm(tmp_path, rollouts):
    task, traj = rollouts[4]
    inner = OracleBackend(0.0, tasks={task.task_id: task})
    cold = CachingBackend(tmp_path / "cache", inner)
    first = annotate_trajectory(cold, traj, sleep=NO_SLEEP)
    assert inner.calls == 2 * math.ceil(len(traj) / 8)
    files = sorted(p.name for p in (tmp_path / "cache").iterdir())
    assert len(files) == inner.calls
    rec = json.loads((tmp_path / "cache" / files[0]).read_text())
    assert set(rec) >= {"request_hash", "stage", "response_content", "timestamp"}

    replay = CachingBackend(tmp_path / "cache", None, source="oracle")
    second = annotate_trajectory(replay, traj, sleep=NO_SLEEP)
    assert second.rewards == first.rewards
    assert inner.calls == 2 * math.ceil(len(traj) / 8)


def test_cache_miss_without_inner(tmp_path, rollouts):
    _, traj = rollouts[0]
    with pytest.raises(CacheMissError):
        annotate_trajectory(CachingBackend(tmp_path / "empty"), traj, sleep=NO_SLEEP)
