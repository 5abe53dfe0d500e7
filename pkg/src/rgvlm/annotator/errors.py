"""Typed annotation failures.

Every error can be tagged with the window it came from via :meth:`locate`,
so a failure deep inside a concurrent run still says which trajectory and
which ``start_index`` to look at.
"""

from __future__ import annotations


class AnnotationError(RuntimeError):
    def __init__(self, message: str, *, trajectory_id: str | None = None, start_index: int | None = None):
        super().__init__(message)
        self.message = message
        self.trajectory_id = trajectory_id
        self.start_index = start_index

    def locate(self, trajectory_id: str, start_index: int) -> "AnnotationError":
        self.trajectory_id = trajectory_id
        self.start_index = start_index
        return self

    def __str__(self) -> str:
        if self.trajectory_id is None:
            return self.message
        return f"[trajectory {self.trajectory_id}, window start_index={self.start_index}] {self.message}"


class ScoreParseError(AnnotationError, ValueError):
    def __init__(self, message: str, *, index: int | None = None, **kw):
        super().__init__(message, **kw)
        self.index = index


class MissingScoreError(ScoreParseError):
    pass


class ConflictingScoreError(ScoreParseError):
    pass


class ScoreRangeError(ScoreParseError):
    pass


class InvalidScoreError(ScoreParseError):
    pass


class ExtraScoreError(ScoreParseError):
    pass


class BackendError(AnnotationError):
    """The backend answered but the answer is unusable (e.g. a 4xx status)."""

    def __init__(self, message: str, *, status: int | None = None, **kw):
        super().__init__(message, **kw)
        self.status = status


class TransportError(BackendError):
    """Network failure, timeout, 429 or 5xx: worth retrying."""


class CacheMissError(BackendError):
    pass
