"""Windowing of trajectories and composition of observation grids."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..dataset import Trajectory, Transition
from ..env import encode_png, render


class GridLayoutError(ValueError):
    pass


@dataclass(frozen=True)
class Window:
    """A contiguous block of transitions plus the frames around them.

    ``observations[i]`` renders ``transitions[i].state``; the final entry
    renders the last ``next_state``.
    """

    trajectory_id: str
    start_index: int
    transitions: tuple[Transition, ...]
    observations: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def actions(self) -> tuple[int, ...]:
        return tuple(t.action for t in self.transitions)


def partition_windows(trajectory: Trajectory, w: int = 8, cell_px: int = 8) -> list[Window]:
    if w < 1:
        raise ValueError(f"window size must be >= 1, got {w}")
    transitions = trajectory.transitions
    if not transitions:
        raise ValueError(f"trajectory {trajectory.id!r} has no transitions")
    windows = []
    for start in range(0, len(transitions), w):
        chunk = tuple(transitions[start : start + w])
        frames = [render(t.state, cell_px) for t in chunk] + [render(chunk[-1].next_state, cell_px)]
        windows.append(Window(trajectory.id, start, chunk, tuple(frames)))
    return windows


# 3x5 bitmap digits for the index stamps, one string per row.
_DIGITS = {
    "0": ("111", "101", "101", "101", "111"),
    "1": ("010", "110", "010", "010", "111"),
    "2": ("111", "001", "111", "100", "111"),
    "3": ("111", "001", "111", "001", "111"),
    "4": ("101", "101", "111", "001", "001"),
    "5": ("111", "100", "111", "001", "111"),
    "6": ("111", "100", "111", "101", "111"),
    "7": ("111", "001", "010", "010", "010"),
    "8": ("111", "101", "111", "101", "111"),
    "9": ("111", "101", "111", "001", "111"),
}
_GLYPHS = {k: np.array([[c == "1" for c in row] for row in rows]) for k, rows in _DIGITS.items()}
LABEL_HEIGHT = 7
GAP = 2
BACKGROUND = (24, 24, 24)
INK = (255, 255, 255)


def _stamp(strip: np.ndarray, number: int) -> None:
    x = 1
    for ch in str(number):
        strip[1:6, x : x + 3][_GLYPHS[ch]] = INK
        x += 4


@dataclass(frozen=True)
class GridImage:
    image: np.ndarray
    layout: tuple[int, int]
    index_labels: tuple[int, ...]

    def png(self) -> bytes:
        return encode_png(self.image)


def compose_grid(window: Window | Sequence[np.ndarray], cols: int = 3, max_rows: int = 3) -> GridImage:
    """Row-major grid of the window's frames, each with its 0-based index
    stamped in a strip above the tile."""
    frames = window.observations if isinstance(window, Window) else tuple(window)
    if not frames:
        raise GridLayoutError("no frames to compose")
    if len(frames) > cols * max_rows:
        raise GridLayoutError(f"{len(frames)} frames do not fit a {max_rows}x{cols} grid")
    th, tw = frames[0].shape[:2]
    if any(f.shape != frames[0].shape for f in frames):
        raise GridLayoutError("frames differ in shape")
    rows = math.ceil(len(frames) / cols)
    cell_h = LABEL_HEIGHT + th
    img = np.empty((rows * cell_h + (rows - 1) * GAP, cols * tw + (cols - 1) * GAP, 3), dtype=np.uint8)
    img[...] = BACKGROUND
    for i, frame in enumerate(frames):
        r, c = divmod(i, cols)
        y, x = r * (cell_h + GAP), c * (tw + GAP)
        _stamp(img[y : y + LABEL_HEIGHT, x : x + tw], i)
        img[y + LABEL_HEIGHT : y + cell_h, x : x + tw] = frame
    return GridImage(img, (rows, cols), tuple(range(len(frames))))
