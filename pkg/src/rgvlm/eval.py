"""Evaluation protocol: roll policies out on held-out tasks and compare methods.

Held-out tasks come from a seed range disjoint from training data
(``EVAL_SEED_OFFSET``). Every episode derives its own random stream from
``(seed, length, task index, episode)``, so results do not depend on the
order episodes run in.
"""

from __future__ import annotations

import csv
import json
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from . import env
from ._validation import check_choice, check_int
from .dataset import Instruction
from .env import EnvConfig, GridState, TaskSpec

EVAL_SEED_OFFSET = 1_000_000_000
INIT_MODES = ("fixed", "randomized")
CSV_HEADER = ("method", "seed", "task_length", "init_mode", "mean_completion", "episodes")


class EvalError(ValueError):
    pass


class Policy(Protocol):
    def act(self, state: GridState, instruction: Instruction, mode: str = "greedy", rng=None) -> int: ...


@dataclass(frozen=True)
class EvalConfig:
    task_lengths: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    tasks_per_length: int = 17
    episodes_per_task: int = 1
    max_steps: int | None = None
    init_mode: str = "fixed"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    env_config: EnvConfig = field(default_factory=EnvConfig)

    def __post_init__(self):
        object.__setattr__(self, "task_lengths", tuple(int(x) for x in self.task_lengths))
        object.__setattr__(self, "seeds", tuple(int(x) for x in self.seeds))
        if not self.task_lengths or not self.seeds:
            raise EvalError("task_lengths and seeds must be non-empty")
        for n in self.task_lengths:
            check_int("task length", n, min_value=1, max_value=6)
        check_int("tasks_per_length", self.tasks_per_length, min_value=1)
        check_int("episodes_per_task", self.episodes_per_task, min_value=1)
        if self.max_steps is not None:
            check_int("max_steps", self.max_steps, min_value=1)
        check_choice("init_mode", self.init_mode, INIT_MODES)

    def steps_for(self, length: int) -> int:
        if self.max_steps is not None:
            return self.max_steps
        return 4 * (self.env_config.width + self.env_config.height) * length

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task_lengths"] = list(self.task_lengths)
        d["seeds"] = list(self.seeds)
        d["env_config"] = self.env_config.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "EvalConfig":
        d = dict(d or {})
        if "env_config" in d:
            d["env_config"] = EnvConfig.from_dict(d["env_config"])
        return cls(**d)


@dataclass(frozen=True)
class EvalRow:
    method: str
    seed: int
    task_length: int
    init_mode: str
    mean_completion: float
    episodes: int

    def key(self) -> tuple:
        return (self.method, self.seed, self.task_length, self.init_mode)


@dataclass
class EvalReport:
    rows: list[EvalRow]
    meta: dict = field(default_factory=lambda: {"length_weighting": "equal"})

    def __post_init__(self):
        self.rows = sorted(self.rows, key=EvalRow.key)
        for r in self.rows:
            if not 0.0 <= r.mean_completion <= 1.0:
                raise EvalError(f"mean_completion {r.mean_completion} outside [0, 1]")

    @property
    def methods(self) -> list[str]:
        return sorted({r.method for r in self.rows})

    def lengths(self, method: str | None = None) -> list[int]:
        return sorted({r.task_length for r in self.rows if method is None or r.method == method})

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.rows + other.rows, dict(self.meta))

    def per_length(self, method: str, init_mode: str) -> dict[int, float]:
        """Mean over seeds of the per-seed mean completion, by task length."""
        acc: dict[int, list[float]] = defaultdict(list)
        for r in self.rows:
            if r.method == method and r.init_mode == init_mode:
                acc[r.task_length].append(r.mean_completion)
        return {n: float(np.mean(v)) for n, v in sorted(acc.items())}

    def overall(self, method: str, init_mode: str, lengths: Sequence[int] | None = None) -> float:
        """Equal-weight average over task lengths."""
        per = self.per_length(method, init_mode)
        keys = [n for n in (lengths if lengths is not None else per) if n in per]
        if not keys:
            raise EvalError(f"no rows for method={method!r} init_mode={init_mode!r}")
        return float(np.mean([per[n] for n in keys]))


@dataclass(frozen=True)
class EpisodeTrace:
    states: tuple[GridState, ...]
    actions: tuple[int, ...]


def completion_fraction(task: TaskSpec, trace: EpisodeTrace | Sequence[GridState]) -> float:
    states = trace.states if isinstance(trace, EpisodeTrace) else trace
    if not states:
        return 0.0
    return min(states[-1].progress, len(task.subtasks)) / len(task.subtasks)


def eval_tasks(length: int, count: int, config: EnvConfig | None = None) -> list[TaskSpec]:
    base = EVAL_SEED_OFFSET + 100_000 * length
    return [env.generate_task(base + j, length, config) for j in range(count)]


def run_episode(policy: Policy, task: TaskSpec, init_mode: str, max_steps: int, rng: np.random.Generator) -> EpisodeTrace:
    state = env.reset(task, init_mode, rng)
    instruction = env.instruction_of(task, rng)
    states, actions = [state], []
    for _ in range(max_steps):
        a = int(policy.act(state, instruction, "greedy", rng))
        out = env.step(state, task, a)
        state = out.next_state
        states.append(state)
        actions.append(a)
        if out.done:
            break
    return EpisodeTrace(tuple(states), tuple(actions))


def _episode_rng(seed: int, length: int, task_index: int, episode: int) -> np.random.Generator:
    return np.random.default_rng([seed, length, task_index, episode])


def evaluate(policy: Policy | Mapping[int, Policy], cfg: EvalConfig, method: str = "policy") -> EvalReport:
    """Greedy rollouts on held-out tasks; one row per (seed, length).

    ``policy`` may map each seed to its own trained policy; a single policy
    is reused for every seed (the seed then only drives start states and
    instruction phrasing).
    """
    tasks = {n: eval_tasks(n, cfg.tasks_per_length, cfg.env_config) for n in cfg.task_lengths}
    rows = []
    for seed in cfg.seeds:
        pol = policy[seed] if isinstance(policy, Mapping) else policy
        for n in cfg.task_lengths:
            total, count = 0.0, 0
            for j, task in enumerate(tasks[n]):
                for e in range(cfg.episodes_per_task):
                    trace = run_episode(pol, task, cfg.init_mode, cfg.steps_for(n), _episode_rng(seed, n, j, e))
                    total += completion_fraction(task, trace)
                    count += 1
            rows.append(EvalRow(method, seed, n, cfg.init_mode, total / count, count))
    return EvalReport(rows)


class ScriptedPolicy:
    """Greedy planner with privileged access to the task (upper bound)."""

    def __init__(self, tasks: Mapping[str, TaskSpec] | Sequence[TaskSpec] | None = None):
        if tasks is None:
            tasks = {}
        elif not isinstance(tasks, Mapping):
            tasks = {t.task_id: t for t in tasks}
        self.tasks = dict(tasks)

    @classmethod
    def for_config(cls, cfg: EvalConfig) -> "ScriptedPolicy":
        return cls([t for n in cfg.task_lengths for t in eval_tasks(n, cfg.tasks_per_length, cfg.env_config)])

    def act(self, state: GridState, instruction: Instruction, mode: str = "greedy", rng=None) -> int:
        task = self.tasks[instruction.task_id]
        action = env.plan_action(state, task)
        return 0 if action is None else action


class RandomPolicy:
    def act(self, state: GridState, instruction: Instruction, mode: str = "greedy", rng=None) -> int:
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        return int(gen.integers(env.NUM_ACTIONS))


def generalization_drop(report_fixed: EvalReport, report_random: EvalReport, method: str | None = None) -> float:
    """``(mean_fixed - mean_random) / mean_fixed`` over all task lengths."""
    methods = report_fixed.methods if method is None else [method]
    if len(methods) != 1:
        raise EvalError(f"reports hold several methods {methods}; name one")
    m = methods[0]
    lf, lr = report_fixed.lengths(m), report_random.lengths(m)
    if lf != lr:
        raise EvalError(f"length coverage differs: fixed {lf} vs randomized {lr}")
    fixed = report_fixed.overall(m, "fixed")
    randomized = report_random.overall(m, "randomized")
    if fixed == 0:
        raise EvalError(f"mean fixed-init completion of {m!r} is 0; drop undefined")
    return (fixed - randomized) / fixed


@dataclass
class ComparisonTable:
    baseline: str
    means: dict[str, dict[str, dict[int, float]]]
    ratios: dict[str, dict[int, float | None]]
    drops: dict[str, float]

    def to_json(self) -> dict:
        return {
            "baseline": self.baseline,
            "ratios": {m: {str(n): v for n, v in r.items()} for m, r in self.ratios.items()},
            "drops": dict(self.drops),
            "means": {m: {mode: {str(n): v for n, v in d.items()} for mode, d in modes.items()} for m, modes in self.means.items()},
        }

    def summary(self) -> str:
        lengths = sorted({n for r in self.ratios.values() for n in r})
        lines = ["method".ljust(14) + "".join(f"  L{n}:ratio" for n in lengths) + "  drop"]
        for m in sorted(self.means):
            cells = []
            for n in lengths:
                v = self.ratios.get(m, {}).get(n)
                cells.append(f"{'n/a' if v is None else f'{v:.3f}':>10}")
            drop = self.drops.get(m)
            lines.append(m.ljust(14) + "".join(cells) + f"  {'n/a' if drop is None else f'{drop:.3f}'}")
        return "\n".join(lines)


def compare(reports: Sequence[EvalReport], baseline: str) -> ComparisonTable:
    if len(reports) < 2:
        raise EvalError("compare needs at least two reports")
    merged = EvalReport([r for rep in reports for r in rep.rows])
    methods = merged.methods
    if baseline not in methods:
        raise EvalError(f"baseline {baseline!r} not among methods: {', '.join(methods)}")
    coverage = {(m, mode): tuple(merged.per_length(m, mode)) for m in methods for mode in INIT_MODES}
    coverage = {k: v for k, v in coverage.items() if v}
    distinct = set(coverage.values())
    if len(distinct) > 1:
        detail = "; ".join(f"{m}/{mode}: {list(v)}" for (m, mode), v in sorted(coverage.items()))
        raise EvalError(f"task-length coverage differs between reports ({detail})")
    means = {m: {mode: merged.per_length(m, mode) for mode in INIT_MODES if (m, mode) in coverage} for m in methods}
    ratio_mode = "fixed" if all("fixed" in means[m] for m in methods) else "randomized"
    base = means[baseline][ratio_mode]
    ratios = {
        m: {n: (means[m][ratio_mode][n] / base[n] if base[n] > 0 else None) for n in base}
        for m in methods
    }
    drops = {}
    for m in methods:
        if "fixed" in means[m] and "randomized" in means[m]:
            fixed = float(np.mean(list(means[m]["fixed"].values())))
            if fixed > 0:
                drops[m] = (fixed - float(np.mean(list(means[m]["randomized"].values())))) / fixed
    return ComparisonTable(baseline, means, ratios, drops)


def _fmt(x: float) -> str:
    return repr(float(x))


def export_csv(report: EvalReport | ComparisonTable, path: str | os.PathLike) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if isinstance(report, ComparisonTable):
            w.writerow(("method", "task_length", "init_mode", "mean_completion", "ratio_vs_baseline"))
            for m in sorted(report.means):
                for mode in sorted(report.means[m]):
                    for n, v in sorted(report.means[m][mode].items()):
                        ratio = report.ratios.get(m, {}).get(n) if mode == "fixed" else None
                        w.writerow((m, n, mode, _fmt(v), "" if ratio is None else _fmt(ratio)))
        else:
            w.writerow(CSV_HEADER)
            for r in report.rows:
                w.writerow((r.method, r.seed, r.task_length, r.init_mode, _fmt(r.mean_completion), r.episodes))
    return path


def read_csv(path: str | os.PathLike) -> EvalReport:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise EvalError(f"{path}: not an evaluation report (header {reader.fieldnames})")
        rows = [
            EvalRow(r["method"], int(r["seed"]), int(r["task_length"]), r["init_mode"], float(r["mean_completion"]), int(r["episodes"]))
            for r in reader
        ]
    return EvalReport(rows)


def write_comparison_json(table: ComparisonTable, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(table.to_json(), indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path

