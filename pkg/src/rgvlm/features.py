"""Sparse feature encoding of (state, instruction) pairs for the IQL networks."""

from __future__ import annotations

import re
from collections import deque
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .dataset import Instruction
from .env import COLORS, KINDS, MAX_SUBTASKS, RECEPTACLE_KINDS, EnvConfig, GridState, template_vocabulary

OOV = "<oov>"
_TOKEN = re.compile(r"[a-z]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def split_clauses(text: str) -> list[list[str]]:
    clauses: list[list[str]] = [[]]
    for tok in tokenize(text):
        if tok == "then":
            clauses.append([])
        else:
            clauses[-1].append(tok)
    return clauses


def _path_lengths(state: GridState, goal) -> dict:
    """Breadth-first path lengths to ``goal`` over unblocked cells (the goal
    itself counts as reachable even when it is a closed door)."""
    dist = {goal: 0}
    queue = deque([goal])
    while queue:
        x, y = queue.popleft()
        for nxt in ((x, y - 1), (x, y + 1), (x - 1, y), (x + 1, y)):
            if nxt not in dist and not state.blocked(nxt):
                dist[nxt] = dist[(x, y)] + 1
                queue.append(nxt)
    return dist


class FeatureEncoder:
    """Binary/count features, one sparse row per (state, instruction).

    Blocks, in order:

    * agent position one-hot over the board (only with ``absolute=True``)
    * one board channel per object kind x colour, and per receptacle kind
      (only with ``absolute=True``)
    * held object (kind x colour) one-hot plus an empty-hands flag
    * door-open flag per colour
    * sub-task progress one-hot (0..6)
    * egocentric offsets to every object/receptacle channel:
      present, sign of dx, sign of dy, within reach
    * focus: egocentric offsets to the entity named last in the current
      clause (present, sign of dx, sign of dy, within reach, on the cell)
      plus, per move, whether it shortens the obstacle-aware path there
    * walls: whether each of the four neighbouring cells is blocked
    * bag of tokens of the whole instruction
    * bag of tokens of the clause for the current sub-task

    The focus block resolves colour/kind words of the current clause against
    the state, so the networks get the grounded target without having to
    learn the token-to-channel conjunction from a few hundred tasks. The
    absolute board blocks are off by default: with them the networks memorise
    per-layout detours and generalise worse to unseen layouts.
    """

    def __init__(
        self,
        env_config: EnvConfig | None = None,
        vocab: Sequence[str] | None = None,
        absolute: bool = False,
    ):
        self.env_config = env_config or EnvConfig()
        self.absolute = bool(absolute)
        self.vocab = tuple(vocab) if vocab is not None else template_vocabulary() + (OOV,)
        if len(self.vocab) > 64:
            raise ValueError(f"vocabulary has {len(self.vocab)} tokens; at most 64 allowed")
        self._tok = {t: i for i, t in enumerate(self.vocab)}
        self._oov = self._tok.get(OOV)
        self.channels = tuple(f"{c}_{k}" for k in KINDS for c in COLORS) + RECEPTACLE_KINDS
        self._chan = {c: i for i, c in enumerate(self.channels)}
        cells = self.env_config.width * self.env_config.height
        n_obj = len(KINDS) * len(COLORS)
        sizes = {
            "agent": cells if self.absolute else 0,
            "board": len(self.channels) * cells if self.absolute else 0,
            "inventory": n_obj + 1,
            "door_open": len(COLORS),
            "progress": MAX_SUBTASKS + 1,
            "ego": len(self.channels) * 8,
            "focus": 13,
            "walls": 4,
            "instr": len(self.vocab),
            "clause": len(self.vocab),
        }
        self.offsets: dict[str, int] = {}
        total = 0
        for name, size in sizes.items():
            self.offsets[name] = total
            total += size
        self.dim = total
        self._clause_cache: dict[str, tuple[list[int], list[list[int]], list[list[str]]]] = {}

    @cached_property
    def state_dim(self) -> int:
        return self.offsets["instr"]

    def _cell(self, pos) -> int:
        return pos[1] * self.env_config.width + pos[0]

    def _token_ids(self, tokens) -> list[int]:
        out = []
        for tok in tokens:
            i = self._tok.get(tok, self._oov)
            if i is not None:
                out.append(i)
        return out

    def _instruction_tokens(self, text: str) -> tuple[list[int], list[list[int]], list[list[str]]]:
        cached = self._clause_cache.get(text)
        if cached is None:
            clauses = split_clauses(text)
            cached = (self._token_ids(tokenize(text)), [self._token_ids(c) for c in clauses], clauses)
            self._clause_cache[text] = cached
        return cached

    def state_indices(self, state: GridState) -> list[int]:
        cells = self.env_config.width * self.env_config.height
        off = self.offsets
        idx = [off["agent"] + self._cell(state.agent_pos)] if self.absolute else []
        ax, ay = state.agent_pos
        placed = []
        for o in state.objects:
            if o.pos is not None:
                placed.append((self._chan[o.id], o.pos))
            if o.kind == "door" and o.is_open:
                idx.append(off["door_open"] + COLORS.index(o.color))
        placed += [(self._chan[r.kind], r.pos) for r in state.receptacles]
        for ch, pos in placed:
            if self.absolute:
                idx.append(off["board"] + ch * cells + self._cell(pos))
            dx, dy = pos[0] - ax, pos[1] - ay
            base = off["ego"] + ch * 8
            idx.append(base)
            idx.append(base + 2 + (dx > 0) - (dx < 0))
            idx.append(base + 5 + (dy > 0) - (dy < 0))
            if abs(dx) + abs(dy) <= 1:
                idx.append(base + 7)
        if state.inventory is None:
            idx.append(off["inventory"] + len(KINDS) * len(COLORS))
        else:
            idx.append(off["inventory"] + self._chan[state.inventory])
        idx.append(off["progress"] + min(state.progress, MAX_SUBTASKS))
        return idx

    @staticmethod
    def focus_position(state: GridState, clause: Sequence[str]):
        """Board position of the last entity named in ``clause``, or None."""
        pos = None
        for i, tok in enumerate(clause):
            if tok in RECEPTACLE_KINDS:
                pos = next((r.pos for r in state.receptacles if r.kind == tok), None)
            elif tok in KINDS and i > 0 and clause[i - 1] in COLORS:
                color = clause[i - 1]
                pos = next((o.pos for o in state.objects if o.kind == tok and o.color == color), None)
        return pos

    def focus_indices(self, state: GridState, clause: Sequence[str]) -> list[int]:
        base = self.offsets["focus"]
        ax, ay = state.agent_pos
        idx = []
        for k, (dx, dy) in enumerate(((0, -1), (0, 1), (-1, 0), (1, 0))):
            if state.blocked((ax + dx, ay + dy)):
                idx.append(self.offsets["walls"] + k)
        pos = self.focus_position(state, clause)
        if pos is None:
            return idx
        dx, dy = pos[0] - ax, pos[1] - ay
        idx += [base, base + 2 + (dx > 0) - (dx < 0), base + 5 + (dy > 0) - (dy < 0)]
        if abs(dx) + abs(dy) <= 1:
            idx.append(base + 7)
        if dx == dy == 0:
            idx.append(base + 8)
        dist = _path_lengths(state, pos)
        here = dist.get(state.agent_pos)
        for k, (mx, my) in enumerate(((0, -1), (0, 1), (-1, 0), (1, 0))):
            d = dist.get((ax + mx, ay + my))
            if d is not None and (here is None or d < here):
                idx.append(base + 9 + k)
        return idx

    def encode_indices(self, state: GridState, instruction: Instruction | str) -> tuple[list[int], list[float]]:
        text = instruction.text if isinstance(instruction, Instruction) else instruction
        whole, clauses, words = self._instruction_tokens(text)
        counts: dict[int, float] = {}
        for i in self.state_indices(state):
            counts[i] = 1.0
        if state.progress < len(words):
            for i in self.focus_indices(state, words[state.progress]):
                counts[i] = 1.0
        for t in whole:
            j = self.offsets["instr"] + t
            counts[j] = counts.get(j, 0.0) + 1.0
        if state.progress < len(clauses):
            for t in clauses[state.progress]:
                j = self.offsets["clause"] + t
                counts[j] = counts.get(j, 0.0) + 1.0
        cols = sorted(counts)
        return cols, [counts[c] for c in cols]

    def encode_many(self, states: Sequence[GridState], instructions: Sequence[Instruction | str]) -> sp.csr_matrix:
        if len(states) != len(instructions):
            raise ValueError("states and instructions must have equal length")
        indptr = [0]
        indices: list[int] = []
        data: list[float] = []
        for s, l in zip(states, instructions):
            cols, vals = self.encode_indices(s, l)
            indices.extend(cols)
            data.extend(vals)
            indptr.append(len(indices))
        return sp.csr_matrix(
            (np.asarray(data, dtype=np.float64), np.asarray(indices, dtype=np.int32), np.asarray(indptr, dtype=np.int64)),
            shape=(len(states), self.dim),
        )

    def encode(self, state: GridState, instruction: Instruction | str) -> np.ndarray:
        return self.encode_many([state], [instruction]).toarray()[0]

    def to_dict(self) -> dict:
        return {"env_config": self.env_config.to_dict(), "vocab": list(self.vocab), "absolute": self.absolute}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureEncoder":
        return cls(EnvConfig.from_dict(d["env_config"]), d["vocab"], d.get("absolute", False))
