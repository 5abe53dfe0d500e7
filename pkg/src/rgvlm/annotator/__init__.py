"""Reward annotation by windowed two-stage queries to a vision-chat model."""

from .backends import (
    API_KEY_ENV,
    AnnotatorBackend,
    CachingBackend,
    ChatRequest,
    Completion,
    HttpBackend,
    OracleBackend,
    WindowContext,
    round_half_away,
)
from .errors import (
    AnnotationError,
    BackendError,
    CacheMissError,
    ConflictingScoreError,
    ExtraScoreError,
    InvalidScoreError,
    MissingScoreError,
    ScoreParseError,
    ScoreRangeError,
    TransportError,
)
from .parsing import format_scores, normalize, parse_scores
from .pipeline import (
    AnnotatorConfig,
    BackendResponse,
    RGVLMLabeler,
    annotate_many,
    annotate_trajectory,
    combine_with_sparse,
    query_backend,
)
from .prompts import PromptBundle, PromptTemplates, build_prompts
from .windows import GridImage, GridLayoutError, Window, compose_grid, partition_windows

__all__ = [name for name in dir() if not name.startswith("_")]
