"""LangGrid: a deterministic instruction-following gridworld.

Tasks are chains of 1-6 sub-tasks (goto, pick, place, toggle) over a small
board of coloured objects and two receptacles. The module provides task
generation, templated instructions, a scripted (optionally suboptimal)
demonstrator, the hidden shaped reward, and an RGB renderer used for
annotation.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .dataset import Instruction, Trajectory

ACTIONS = ("up", "down", "left", "right", "pick", "place", "toggle")
UP, DOWN, LEFT, RIGHT, PICK, PLACE, TOGGLE = range(len(ACTIONS))
NUM_ACTIONS = len(ACTIONS)
MOVES = {UP: (0, -1), DOWN: (0, 1), LEFT: (-1, 0), RIGHT: (1, 0)}

KINDS = ("key", "ball", "box", "door")
PICKABLE = ("key", "ball", "box")
COLORS = ("red", "green", "blue", "yellow")
RECEPTACLE_KINDS = ("table", "bin")
SUBTASK_KINDS = ("goto", "pick", "place", "toggle")

MIN_SUBTASKS, MAX_SUBTASKS = 1, 6
_MAX_GENERATION_TRIES = 200

Pos = tuple[int, int]


class TaskGenerationError(RuntimeError):
    """Raised when no feasible task could be sampled within the retry budget."""


class PlannerError(RuntimeError):
    """Raised when the scripted demonstrator exceeds its step budget."""


@dataclass(frozen=True)
class EnvConfig:
    width: int = 8
    height: int = 8
    cell_px: int = 8
    object_count: int = 5
    colors: tuple[str, ...] = COLORS
    seed: int = 0

    def __post_init__(self):
        if self.width < 3 or self.height < 3:
            raise ValueError("board must be at least 3x3")
        if self.cell_px < 8 or self.cell_px % 8:
            raise ValueError(f"cell_px must be a positive multiple of 8, got {self.cell_px}")
        unknown = set(self.colors) - set(COLORS)
        if unknown or not self.colors:
            raise ValueError(f"unsupported colors: {sorted(unknown)}")
        max_objects = len(self.colors) * len(KINDS)
        if not 1 <= self.object_count <= max_objects:
            raise ValueError(f"object_count must be in [1, {max_objects}]")
        if self.object_count + len(RECEPTACLE_KINDS) + 1 > self.width * self.height:
            raise ValueError("board too small for the configured object count")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["colors"] = list(self.colors)
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "EnvConfig":
        d = dict(d or {})
        if "colors" in d:
            d["colors"] = tuple(d["colors"])
        return cls(**d)


@dataclass(frozen=True)
class GridObject:
    id: str
    kind: str
    color: str
    pos: Pos | None
    is_open: bool = False


@dataclass(frozen=True)
class Receptacle:
    id: str
    kind: str
    pos: Pos


@dataclass(frozen=True)
class GridState:
    """Symbolic board state.

    ``progress`` counts completed sub-tasks of the episode's task; the
    simulator needs it to know which sub-task is current.
    """

    width: int
    height: int
    agent_pos: Pos
    inventory: str | None
    objects: tuple[GridObject, ...]
    receptacles: tuple[Receptacle, ...]
    progress: int = 0

    def obj(self, obj_id: str) -> GridObject:
        for o in self.objects:
            if o.id == obj_id:
                return o
        raise KeyError(obj_id)

    def receptacle(self, rec_id: str) -> Receptacle:
        for r in self.receptacles:
            if r.id == rec_id:
                return r
        raise KeyError(rec_id)

    def position_of(self, entity_id: str) -> Pos | None:
        for r in self.receptacles:
            if r.id == entity_id:
                return r.pos
        return self.obj(entity_id).pos

    def in_bounds(self, pos: Pos) -> bool:
        return 0 <= pos[0] < self.width and 0 <= pos[1] < self.height

    def blocked(self, pos: Pos) -> bool:
        if not self.in_bounds(pos):
            return True
        return any(o.kind == "door" and not o.is_open and o.pos == pos for o in self.objects)

    def free_cells(self) -> list[Pos]:
        """Cells holding neither an object nor a receptacle, row-major."""
        taken = {o.pos for o in self.objects if o.pos is not None}
        taken |= {r.pos for r in self.receptacles}
        return [(x, y) for y in range(self.height) for x in range(self.width) if (x, y) not in taken]

    def to_dict(self) -> dict:
        return {
            "w": self.width,
            "h": self.height,
            "agent": list(self.agent_pos),
            "inv": self.inventory,
            "objects": [
                {
                    "id": o.id,
                    "kind": o.kind,
                    "color": o.color,
                    "pos": None if o.pos is None else list(o.pos),
                    "open": o.is_open,
                }
                for o in self.objects
            ],
            "receptacles": [{"id": r.id, "kind": r.kind, "pos": list(r.pos)} for r in self.receptacles],
            "progress": self.progress,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridState":
        return cls(
            width=int(d["w"]),
            height=int(d["h"]),
            agent_pos=(int(d["agent"][0]), int(d["agent"][1])),
            inventory=d["inv"],
            objects=tuple(
                GridObject(
                    id=o["id"],
                    kind=o["kind"],
                    color=o["color"],
                    pos=None if o["pos"] is None else (int(o["pos"][0]), int(o["pos"][1])),
                    is_open=bool(o["open"]),
                )
                for o in d["objects"]
            ),
            receptacles=tuple(
                Receptacle(id=r["id"], kind=r["kind"], pos=(int(r["pos"][0]), int(r["pos"][1])))
                for r in d["receptacles"]
            ),
            progress=int(d.get("progress", 0)),
        )


@dataclass(frozen=True)
class SubTask:
    kind: str
    target: str
    receptacle: str | None = None

    def __post_init__(self):
        if self.kind not in SUBTASK_KINDS:
            raise ValueError(f"unknown sub-task kind {self.kind!r}")
        if (self.kind == "place") != (self.receptacle is not None):
            raise ValueError("only place sub-tasks carry a receptacle")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "target": self.target}
        if self.receptacle is not None:
            d["receptacle"] = self.receptacle
        return d


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    subtasks: tuple[SubTask, ...]
    init_state: GridState
    seed: int | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.subtasks)


@dataclass(frozen=True)
class StepOutcome:
    next_state: GridState
    shaped_reward: float
    subtasks_completed: int
    done: bool


def _as_rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def manhattan(a: Pos, b: Pos) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def neighbors(pos: Pos) -> list[tuple[int, Pos]]:
    return [(a, (pos[0] + dx, pos[1] + dy)) for a, (dx, dy) in MOVES.items()]


# ---------------------------------------------------------------------------
# task generation


def _task_id(init_state: GridState, subtasks: Sequence[SubTask]) -> str:
    payload = json.dumps(
        {"state": init_state.to_dict(), "subtasks": [s.to_dict() for s in subtasks]},
        sort_keys=True,
        separators=(",", ":"),
    )
    return "task-" + hashlib.sha1(payload.encode()).hexdigest()[:12]


def _connected(state: GridState) -> bool:
    open_cells = [(x, y) for y in range(state.height) for x in range(state.width) if not state.blocked((x, y))]
    seen = {state.agent_pos}
    queue = deque([state.agent_pos])
    while queue:
        cur = queue.popleft()
        for _, nxt in neighbors(cur):
            if nxt not in seen and not state.blocked(nxt):
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) == len(open_cells)


def _sample_layout(rng: np.random.Generator, config: EnvConfig) -> GridState | None:
    combos = [(k, c) for k in KINDS for c in config.colors]
    picks = rng.choice(len(combos), size=config.object_count, replace=False)
    chosen = sorted((combos[i] for i in picks), key=lambda kc: (KINDS.index(kc[0]), COLORS.index(kc[1])))
    cells = rng.permutation(config.width * config.height)
    coords = [(int(c % config.width), int(c // config.width)) for c in cells]
    receptacles = tuple(Receptacle(id=k, kind=k, pos=coords[i]) for i, k in enumerate(RECEPTACLE_KINDS))
    offset = len(RECEPTACLE_KINDS)
    objects = tuple(
        GridObject(id=f"{color}_{kind}", kind=kind, color=color, pos=coords[offset + i])
        for i, (kind, color) in enumerate(chosen)
    )
    agent = coords[offset + len(objects)]
    state = GridState(config.width, config.height, agent, None, objects, receptacles)
    return state if _connected(state) else None


def _sample_chain(rng: np.random.Generator, state: GridState, n: int) -> list[SubTask] | None:
    holding: str | None = None
    picked: set[str] = set()
    used_receptacles: set[str] = set()
    toggled: set[str] = set()
    chain: list[SubTask] = []
    for _ in range(n):
        prev_target = chain[-1].target if chain else None
        options: dict[str, list[SubTask]] = {}
        if holding is None:
            options["pick"] = [
                SubTask("pick", o.id) for o in state.objects if o.kind in PICKABLE and o.id not in picked
            ]
        else:
            options["place"] = [
                SubTask("place", holding, r.id) for r in state.receptacles if r.id not in used_receptacles
            ]
        options["toggle"] = [
            SubTask("toggle", o.id) for o in state.objects if o.kind == "door" and o.id not in toggled
        ]
        goto_targets = [r.id for r in state.receptacles]
        goto_targets += [o.id for o in state.objects if o.kind != "door" and o.id != holding]
        options["goto"] = [SubTask("goto", t) for t in goto_targets if t != prev_target]
        kinds = [k for k in SUBTASK_KINDS if options.get(k)]
        if not kinds:
            return None
        kind = kinds[int(rng.integers(len(kinds)))]
        sub = options[kind][int(rng.integers(len(options[kind])))]
        chain.append(sub)
        if kind == "pick":
            holding = sub.target
            picked.add(sub.target)
        elif kind == "place":
            holding = None
            used_receptacles.add(sub.receptacle)
        elif kind == "toggle":
            toggled.add(sub.target)
    return chain


def step_budget(task: TaskSpec) -> int:
    s = task.init_state
    return s.width * s.height * (len(task.subtasks) + 1) * 4


def generate_task(rng, num_subtasks: int, config: EnvConfig | None = None) -> TaskSpec:
    """Sample a feasible task with ``num_subtasks`` sub-tasks.

    ``rng`` may be an integer seed (recorded on the task so it can be
    regenerated) or a ``numpy.random.Generator``.
    """
    if not MIN_SUBTASKS <= num_subtasks <= MAX_SUBTASKS:
        raise ValueError(f"num_subtasks must be in [{MIN_SUBTASKS}, {MAX_SUBTASKS}], got {num_subtasks}")
    config = config or EnvConfig()
    seed = int(rng) if isinstance(rng, (int, np.integer)) else None
    gen = _as_rng(rng)
    for _ in range(_MAX_GENERATION_TRIES):
        state = _sample_layout(gen, config)
        if state is None:
            continue
        chain = _sample_chain(gen, state, num_subtasks)
        if chain is None:
            continue
        task = TaskSpec(_task_id(state, chain), tuple(chain), state, seed)
        if is_feasible(task):
            return task
    raise TaskGenerationError(
        f"no feasible {num_subtasks}-subtask task after {_MAX_GENERATION_TRIES} tries; board too dense?"
    )


def is_feasible(task: TaskSpec) -> bool:
    try:
        states, _ = _run_planner(task, 0.0, None)
    except PlannerError:
        return False
    return states[-1].progress == len(task.subtasks)


# ---------------------------------------------------------------------------
# instructions

_TEMPLATES = {
    "goto": ("go to the {t}", "walk to the {t}", "move to the {t}", "navigate to the {t}"),
    "pick": ("pick up the {t}", "grab the {t}", "take the {t}"),
    "place": ("put the {t} on the {r}", "place the {t} on the {r}", "drop the {t} on the {r}"),
    "toggle": ("open the {t}", "toggle the {t}", "switch the {t}"),
}
CLAUSE_JOINER = " then "


def _describe(state: GridState, entity_id: str) -> str:
    for r in state.receptacles:
        if r.id == entity_id:
            return r.kind
    o = state.obj(entity_id)
    return f"{o.color} {o.kind}"


def paraphrases(task: TaskSpec, index: int) -> tuple[str, ...]:
    sub = task.subtasks[index]
    state = task.init_state
    t = _describe(state, sub.target)
    r = _describe(state, sub.receptacle) if sub.receptacle else ""
    return tuple(tpl.format(t=t, r=r) for tpl in _TEMPLATES[sub.kind])


def template_vocabulary() -> tuple[str, ...]:
    words = {"then", *COLORS, *KINDS, *RECEPTACLE_KINDS}
    for group in _TEMPLATES.values():
        for tpl in group:
            words.update(w for w in tpl.replace("{t}", "").replace("{r}", "").split())
    return tuple(sorted(words))


def instruction_of(task: TaskSpec, rng) -> Instruction:
    gen = _as_rng(rng)
    clauses = []
    for i in range(len(task.subtasks)):
        options = paraphrases(task, i)
        clauses.append(options[int(gen.integers(len(options)))])
    return Instruction(text=CLAUSE_JOINER.join(clauses), task_id=task.task_id)


# ---------------------------------------------------------------------------
# dynamics


def reset(task: TaskSpec, init_mode: str = "fixed", rng=None) -> GridState:
    if init_mode == "fixed":
        return task.init_state
    if init_mode != "randomized":
        raise ValueError(f"init_mode must be 'fixed' or 'randomized', got {init_mode!r}")
    cells = task.init_state.free_cells()
    pos = cells[int(_as_rng(rng).integers(len(cells)))]
    return replace(task.init_state, agent_pos=pos)


def current_subtask(task: TaskSpec, state: GridState) -> SubTask | None:
    return task.subtasks[state.progress] if state.progress < len(task.subtasks) else None


def target_position(state: GridState, sub: SubTask) -> Pos | None:
    if sub.kind == "place":
        return state.receptacle(sub.receptacle).pos
    return state.position_of(sub.target)


def _within_reach(state: GridState, pos: Pos | None) -> bool:
    return pos is not None and manhattan(state.agent_pos, pos) <= 1


def _replace_object(state: GridState, obj_id: str, **changes) -> tuple[GridObject, ...]:
    return tuple(replace(o, **changes) if o.id == obj_id else o for o in state.objects)


def _apply(state: GridState, sub: SubTask | None, action: int) -> GridState:
    if action in MOVES:
        dx, dy = MOVES[action]
        nxt = (state.agent_pos[0] + dx, state.agent_pos[1] + dy)
        return state if state.blocked(nxt) else replace(state, agent_pos=nxt)
    # interactions only ever touch the current sub-task's target
    if sub is None:
        return state
    if action == PICK and sub.kind == "pick" and state.inventory is None:
        if _within_reach(state, state.obj(sub.target).pos):
            return replace(state, inventory=sub.target, objects=_replace_object(state, sub.target, pos=None))
    elif action == PLACE and sub.kind == "place" and state.inventory == sub.target:
        rec = state.receptacle(sub.receptacle)
        occupied = any(o.pos == rec.pos for o in state.objects)
        if _within_reach(state, rec.pos) and not occupied:
            return replace(state, inventory=None, objects=_replace_object(state, sub.target, pos=rec.pos))
    elif action == TOGGLE and sub.kind == "toggle":
        door = state.obj(sub.target)
        if _within_reach(state, door.pos):
            return replace(state, objects=_replace_object(state, sub.target, is_open=not door.is_open))
    return state


def _completes(sub: SubTask, before: GridState, after: GridState) -> bool:
    if sub.kind == "goto":
        goal = target_position(after, sub)
        return goal is not None and after.agent_pos == goal and before.agent_pos != goal
    if sub.kind == "pick":
        return before.inventory is None and after.inventory == sub.target
    if sub.kind == "place":
        return before.inventory == sub.target and after.obj(sub.target).pos == after.receptacle(sub.receptacle).pos
    return before.obj(sub.target).is_open != after.obj(sub.target).is_open


def step(state: GridState, task: TaskSpec, action: int) -> StepOutcome:
    if not 0 <= int(action) < NUM_ACTIONS:
        raise ValueError(f"action must be in [0, {NUM_ACTIONS}), got {action}")
    action = int(action)
    sub = current_subtask(task, state)
    nxt = _apply(state, sub, action)
    if sub is not None and _completes(sub, state, nxt):
        nxt = replace(nxt, progress=state.progress + 1)
    reward = shaped_reward(task, state, action, nxt)
    return StepOutcome(nxt, reward, nxt.progress, nxt.progress == len(task.subtasks))


def shaped_reward(task: TaskSpec, state: GridState, action: int, next_state: GridState) -> float:
    """Hidden ground-truth reward: 1.0 on sub-task completion, 0.3 for
    strictly approaching the current target, else 0.0."""
    if next_state.progress > state.progress:
        return 1.0
    sub = current_subtask(task, state)
    if sub is None:
        return 0.0
    goal = target_position(state, sub)
    if goal is None:
        return 0.0
    if manhattan(next_state.agent_pos, goal) < manhattan(state.agent_pos, goal):
        return 0.3
    return 0.0


# ---------------------------------------------------------------------------
# scripted demonstrator


def _bfs_first_action(state: GridState, goals: set[Pos]) -> int | None:
    """First move of a shortest path to any goal cell (fixed neighbour order)."""
    start = state.agent_pos
    if start in goals:
        return None
    first: dict[Pos, int] = {start: -1}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for a, nxt in neighbors(cur):
            if nxt in first or state.blocked(nxt):
                continue
            first[nxt] = a if cur == start else first[cur]
            if nxt in goals:
                return first[nxt]
            queue.append(nxt)
    return None


def plan_action(state: GridState, task: TaskSpec) -> int | None:
    """Greedy shortest-path action towards the current sub-task; None when done."""
    sub = current_subtask(task, state)
    if sub is None:
        return None
    goal = target_position(state, sub)
    if goal is None:
        raise PlannerError(f"target of {sub} has no position")
    if sub.kind == "goto":
        if state.agent_pos == goal:
            # must re-enter the target cell; step off first
            for a, nxt in neighbors(state.agent_pos):
                if not state.blocked(nxt):
                    return a
            raise PlannerError("agent is boxed in")
        action = _bfs_first_action(state, {goal})
    else:
        if _within_reach(state, goal):
            return {"pick": PICK, "place": PLACE, "toggle": TOGGLE}[sub.kind]
        reach = {goal, *(p for _, p in neighbors(goal))}
        action = _bfs_first_action(state, {p for p in reach if not state.blocked(p)})
    if action is None:
        raise PlannerError(f"no path to {sub}")
    return action


def _run_planner(task: TaskSpec, suboptimality: float, rng) -> tuple[list[GridState], list[int]]:
    gen = _as_rng(rng) if suboptimality > 0 else None
    state = task.init_state
    states, actions = [state], []
    budget = step_budget(task)
    while state.progress < len(task.subtasks):
        if len(actions) >= budget:
            raise PlannerError(f"step budget {budget} exceeded on {task.task_id}")
        if gen is not None and gen.random() < suboptimality:
            detours = [a for a, p in neighbors(state.agent_pos) if not state.blocked(p)]
            if detours:
                action = detours[int(gen.integers(len(detours)))]
                state = step(state, task, action).next_state
                states.append(state)
                actions.append(action)
                continue
        action = plan_action(state, task)
        state = step(state, task, action).next_state
        states.append(state)
        actions.append(action)
    return states, actions


def scripted_rollout(
    task: TaskSpec,
    suboptimality: float,
    rng,
    *,
    instruction: Instruction | None = None,
    trajectory_id: str | None = None,
) -> Trajectory:
    """Demonstration that completes ``task``.

    Before each planner action a random movement detour is inserted with
    probability ``suboptimality``; with 0 the demonstration is a shortest
    solution under the greedy planner.
    """
    if not 0.0 <= suboptimality <= 1.0:
        raise ValueError("suboptimality must lie in [0, 1]")
    gen = _as_rng(rng)
    if instruction is None:
        instruction = instruction_of(task, gen)
    states, actions = _run_planner(task, suboptimality, gen)
    return Trajectory(
        id=trajectory_id or f"{task.task_id}-{hashlib.sha1(instruction.text.encode()).hexdigest()[:6]}",
        states=tuple(states),
        actions=tuple(actions),
        instruction=instruction,
        meta={
            "seed": task.seed if task.seed is not None else -1,
            "num_subtasks": len(task.subtasks),
            "suboptimality": float(suboptimality),
        },
    )


def rollout_rewards(task: TaskSpec, trajectory: Trajectory) -> list[float]:
    """Ground-truth shaped reward of every transition of ``trajectory``."""
    return [shaped_reward(task, t.state, t.action, t.next_state) for t in trajectory.transitions]


# ---------------------------------------------------------------------------
# rendering

RGB = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 90, 230),
    "yellow": (230, 210, 40),
    "table": (139, 90, 43),
    "bin": (110, 110, 110),
    "agent": (255, 255, 255),
    "progress": (255, 0, 255),
}

_SHAPES = {
    "key": np.array([[1, 1, 0, 0], [1, 1, 1, 1], [0, 0, 1, 0], [0, 0, 1, 1]], dtype=bool),
    "ball": np.array([[0, 1, 1, 0], [1, 1, 1, 1], [1, 1, 1, 1], [0, 1, 1, 0]], dtype=bool),
    "box": np.array([[1, 1, 1, 1], [1, 0, 0, 1], [1, 0, 0, 1], [1, 1, 1, 1]], dtype=bool),
}


def _draw_object(cell: np.ndarray, obj: GridObject) -> None:
    color = RGB[obj.color]
    if obj.kind == "door":
        if obj.is_open:
            cell[1, 1:7] = cell[6, 1:7] = color
            cell[1:7, 1] = cell[1:7, 6] = color
        else:
            cell[1:7, 1:7] = color
        return
    cell[2:6, 2:6][_SHAPES[obj.kind]] = color


def render(state: GridState, cell_px: int = 8) -> np.ndarray:
    """RGB ``uint8`` image of shape (height*cell_px, width*cell_px, 3)."""
    if cell_px < 8 or cell_px % 8:
        raise ValueError(f"cell_px must be a positive multiple of 8, got {cell_px}")
    img = np.zeros((state.height * 8, state.width * 8, 3), dtype=np.uint8)

    def cell(pos: Pos) -> np.ndarray:
        return img[pos[1] * 8 : pos[1] * 8 + 8, pos[0] * 8 : pos[0] * 8 + 8]

    for r in state.receptacles:
        cell(r.pos)[1:7, 1:7] = RGB[r.kind]
    for o in state.objects:
        if o.pos is not None:
            _draw_object(cell(o.pos), o)
    agent = cell(state.agent_pos)
    agent[0, :] = agent[7, :] = agent[:, 0] = agent[:, 7] = RGB["agent"]
    if state.inventory is not None:
        held = state.obj(state.inventory)
        agent[0, 0] = agent[0, 7] = agent[7, 0] = agent[7, 7] = RGB[held.color]
        col = 1 + 2 * KINDS.index(held.kind)
        agent[0, col : col + 2] = RGB[held.color]
    if state.progress:
        img[-1, : 2 * state.progress] = RGB["progress"]
    if cell_px > 8:
        img = np.repeat(np.repeat(img, cell_px // 8, axis=0), cell_px // 8, axis=1)
    return img


def encode_png(image: np.ndarray) -> bytes:
    import io

    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(image)).save(buf, format="PNG")
    return buf.getvalue()


def iter_tasks(seeds: Iterable[int], num_subtasks: int, config: EnvConfig | None = None):
    for seed in seeds:
        yield generate_task(int(seed), num_subtasks, config)
