from __future__ import annotations

import numpy as np
import pytest

from rgvlm import env
from rgvlm.dataset import RewardLabelSet


@pytest.fixture
def task1():
    return env.generate_task(1, 1)


@pytest.fixture
def rollouts():
    """Twelve scripted rollouts over lengths 1-6 with their shaped rewards."""
    out = []
    for i in range(12):
        task = env.generate_task(100 + i, 1 + i % 6)
        traj = env.scripted_rollout(task, 0.3, np.random.default_rng(i), trajectory_id=f"r{i:02d}")
        out.append((task, traj))
    return out


def oracle_labels(task, traj, source="oracle"):
    return RewardLabelSet(traj.id, tuple(env.rollout_rewards(task, traj)), source)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
