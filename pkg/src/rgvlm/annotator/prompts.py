"""Two-stage prompt construction.

Stage 1 asks the model to analyse what each action did; stage 2 asks for
one integer score per action in a fixed line grammar. The literal wording
is a reconstruction, so templates are versioned and can be replaced via
:class:`PromptTemplates` without touching code.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..dataset import Instruction
from ..env import ACTIONS
from .windows import GridImage, Window


@dataclass(frozen=True)
class PromptTemplates:
    version: str = "v1"
    stage1: str = (
        "You are shown {n_frames} consecutive frames of an agent in a grid world, arranged "
        "left to right and top to bottom. Each frame is stamped with its index in the strip above it. "
        "The agent is drawn as a white square outline.\n"
        "Task goal: {goal}\n"
        "Between frame i and frame i+1 the agent took action i:\n"
        "{action_list}\n"
        "For each action, describe what changed and whether it helped accomplish the task goal."
    )
    stage2: str = (
        "Based on your analysis, assign each action a reward score from 0 to {scale_max}, where 0 means "
        "the action did not help at all and {scale_max} means it directly accomplished part of the goal. "
        "Reply with exactly {n} lines, one per action, each in the form \"Action <i>: <score>\" "
        "with an integer score, for i from 0 to {last}."
    )

    def to_dict(self) -> dict:
        return {"version": self.version, "stage1": self.stage1, "stage2": self.stage2}


@dataclass(frozen=True)
class PromptBundle:
    stage1_text: str
    stage2_text: str
    image: GridImage
    expected_scores: int


def action_list(actions) -> str:
    return "\n".join(f"Action {i}: {ACTIONS[a]}" for i, a in enumerate(actions))


def build_prompts(
    window: Window,
    grid: GridImage,
    goal: Instruction | str,
    scale_max: int = 10,
    templates: PromptTemplates | None = None,
) -> PromptBundle:
    templates = templates or PromptTemplates()
    text = goal.text if isinstance(goal, Instruction) else str(goal)
    n = len(window)
    stage1 = templates.stage1.format(n_frames=n + 1, goal=text, action_list=action_list(window.actions))
    stage2 = templates.stage2.format(scale_max=scale_max, n=n, last=n - 1)
    return PromptBundle(stage1, stage2, grid, n)
