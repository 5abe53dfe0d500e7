"""Windowed two-stage reward annotation of trajectories."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

from sklearn.base import BaseEstimator, TransformerMixin

from .._validation import check_int, check_is_fitted, check_real
from ..dataset import Instruction, LabelMismatchError, RewardLabelSet, Trajectory
from .backends import AnnotatorBackend, ChatRequest, WindowContext, image_part, text_part
from .errors import AnnotationError, TransportError
from .parsing import normalize, parse_scores
from .prompts import PromptBundle, PromptTemplates, build_prompts
from .windows import compose_grid, partition_windows


@dataclass(frozen=True)
class AnnotatorConfig:
    window_size: int = 8
    scale_max: int = 10
    max_retries: int = 3
    concurrency_limit: int = 4
    sparse_bonus: float = 1.0
    cache_dir: str | None = None
    model: str = "default"
    temperature: float = 0.0
    backoff_base: float = 1.0
    templates: PromptTemplates = field(default_factory=PromptTemplates)

    def __post_init__(self):
        check_int("window_size", self.window_size, min_value=1)
        check_int("scale_max", self.scale_max, min_value=1)
        check_int("max_retries", self.max_retries, min_value=0)
        check_int("concurrency_limit", self.concurrency_limit, min_value=1)
        check_real("sparse_bonus", self.sparse_bonus, low=0.0)
        check_real("backoff_base", self.backoff_base, low=0.0)
        if self.window_size + 1 > 9:
            raise ValueError("window_size > 8 does not fit the 3x3 observation grid")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["templates"] = self.templates.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "AnnotatorConfig":
        d = dict(d or {})
        if "templates" in d and isinstance(d["templates"], dict):
            d["templates"] = PromptTemplates(**d["templates"])
        return cls(**d)


@dataclass(frozen=True)
class BackendResponse:
    stage1_text: str
    stage2_text: str
    usage_meta: dict


def _with_retries(backend: AnnotatorBackend, request: ChatRequest, cfg: AnnotatorConfig, sleep: Callable[[float], None]):
    for attempt in range(cfg.max_retries + 1):
        try:
            return backend.complete(request)
        except TransportError as exc:
            if attempt == cfg.max_retries:
                exc.message = f"{exc.message} (gave up after {attempt + 1} attempts)"
                raise
            sleep(cfg.backoff_base * 2**attempt)
    raise AssertionError("unreachable")


def query_backend(
    backend: AnnotatorBackend,
    bundle: PromptBundle,
    cfg: AnnotatorConfig,
    context: WindowContext | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> BackendResponse:
    """Two sequential turns; the second carries the first reply as context."""
    first = {"role": "user", "content": [image_part(bundle.image.png()), text_part(bundle.stage1_text)]}
    req1 = ChatRequest(cfg.model, cfg.temperature, (first,), 1, context)
    r1 = _with_retries(backend, req1, cfg, sleep)
    history = (
        first,
        {"role": "assistant", "content": [text_part(r1.content)]},
        {"role": "user", "content": [text_part(bundle.stage2_text)]},
    )
    r2 = _with_retries(backend, ChatRequest(cfg.model, cfg.temperature, history, 2, context), cfg, sleep)
    sources = {r1.meta.get("source"), r2.meta.get("source")}
    meta = {"stage1": r1.meta, "stage2": r2.meta, "source": sources.pop() if len(sources) == 1 else "mixed"}
    return BackendResponse(r1.content, r2.content, meta)


def annotate_trajectory(
    backend: AnnotatorBackend,
    trajectory: Trajectory,
    goal: Instruction | str | None = None,
    cfg: AnnotatorConfig | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> RewardLabelSet:
    """Rewards in [0, 1] for every transition, in temporal order."""
    cfg = cfg or AnnotatorConfig()
    goal = goal if goal is not None else trajectory.instruction
    windows = partition_windows(trajectory, cfg.window_size)

    def run(window) -> list[float]:
        try:
            bundle = build_prompts(window, compose_grid(window), goal, cfg.scale_max, cfg.templates)
            context = WindowContext(trajectory, window, cfg.scale_max)
            response = query_backend(backend, bundle, cfg, context, sleep)
            return normalize(parse_scores(response.stage2_text, bundle.expected_scores, cfg.scale_max), cfg.scale_max)
        except AnnotationError as exc:
            raise exc.locate(trajectory.id, window.start_index)

    if cfg.concurrency_limit == 1 or len(windows) == 1:
        chunks = [run(w) for w in windows]
    else:
        with ThreadPoolExecutor(max_workers=min(cfg.concurrency_limit, len(windows))) as pool:
            chunks = list(pool.map(run, windows))
    rewards = tuple(r for chunk in chunks for r in chunk)
    return RewardLabelSet(trajectory.id, rewards, backend.label_source)


def annotate_many(
    backend: AnnotatorBackend,
    trajectories: Iterable[Trajectory],
    cfg: AnnotatorConfig | None = None,
    on_label: Callable[[RewardLabelSet], None] | None = None,
    on_error: Callable[[Trajectory, AnnotationError], None] | None = None,
) -> list[RewardLabelSet]:
    """Annotate trajectories one after another; failures go to ``on_error``
    (or propagate when it is not given)."""
    out = []
    for traj in trajectories:
        try:
            label = annotate_trajectory(backend, traj, cfg=cfg)
        except AnnotationError as exc:
            if on_error is None:
                raise
            on_error(traj, exc)
            continue
        if on_label is not None:
            on_label(label)
        out.append(label)
    return out


def combine_with_sparse(dense: RewardLabelSet, trajectory: Trajectory, sparse_bonus: float = 1.0) -> RewardLabelSet:
    """Dense labels with ``sparse_bonus`` added to the final transition."""
    if dense.trajectory_id != trajectory.id:
        raise LabelMismatchError(f"labels for {dense.trajectory_id!r} do not belong to {trajectory.id!r}")
    if len(dense.rewards) != len(trajectory):
        raise LabelMismatchError(
            f"{trajectory.id}: {len(dense.rewards)} dense rewards for {len(trajectory)} transitions"
        )
    rewards = list(dense.rewards)
    rewards[-1] += sparse_bonus
    return RewardLabelSet(dense.trajectory_id, tuple(rewards), "combined")


class RGVLMLabeler(TransformerMixin, BaseEstimator):
    """``transform(trajectories) -> list[RewardLabelSet]`` via windowed
    two-stage annotation; ``combine=True`` adds the terminal bonus."""

    def __init__(self, backend=None, window_size: int = 8, scale_max: int = 10, concurrency_limit: int = 4, combine: bool = False, sparse_bonus: float = 1.0):
        self.backend = backend
        self.window_size = window_size
        self.scale_max = scale_max
        self.concurrency_limit = concurrency_limit
        self.combine = combine
        self.sparse_bonus = sparse_bonus

    def fit(self, X: Sequence[Trajectory], y=None) -> "RGVLMLabeler":
        if self.backend is None:
            raise ValueError("RGVLMLabeler needs a backend")
        self.config_ = AnnotatorConfig(
            window_size=self.window_size,
            scale_max=self.scale_max,
            concurrency_limit=self.concurrency_limit,
            sparse_bonus=self.sparse_bonus,
        )
        return self

    def transform(self, X: Sequence[Trajectory]) -> list[RewardLabelSet]:
        check_is_fitted(self, "config_")
        labels = [annotate_trajectory(self.backend, t, cfg=self.config_) for t in X]
        if self.combine:
            labels = [combine_with_sparse(lab, t, self.sparse_bonus) for lab, t in zip(labels, X)]
        return labels
