"""Score extraction from free-form model replies.

The stage-2 prompt asks for lines of the form ``Action <i>: <score>``.
Replies are searched for that pattern anywhere, so surrounding prose,
markdown emphasis, bullets, JSON-ish quoting and reordered lines are all
accepted. Anything that does not yield exactly one in-range integer per
index is an error; nothing is ever defaulted.
"""

from __future__ import annotations

import re

from .errors import (
    ConflictingScoreError,
    ExtraScoreError,
    InvalidScoreError,
    MissingScoreError,
    ScoreParseError,
    ScoreRangeError,
)

_DASHES = "\\-\u2013\u2014"
_DECOR = "\"'*_`"
SCORE_LINE = re.compile(
    rf"""
    action[{_DECOR}\s]*\#?\s*(?P<idx>\d+)          # index
    [{_DECOR}]*\s*(?:\([^)\n]*\)|\[[^\]\n]*\])?      # optional "(up)" or "[up]"
    [{_DECOR}\s]*[:={_DASHES}>\u2192]+[{_DECOR}\s]*   # separator
    (?:score\s*(?:of|[:=])?\s*)?[{_DECOR}]*
    (?P<score>[-+]?\d+(?:\.\d+)?)                    # value
    (?:\s*(?:/|out\s+of)\s*(?P<den>\d+))?            # optional "/10"
    """,
    re.IGNORECASE | re.VERBOSE,
)


def parse_scores(text: str, n: int, scale_max: int = 10) -> list[int]:
    """Exactly ``n`` integer scores in ``[0, scale_max]``, indexed 0..n-1."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not isinstance(text, str):
        raise ScoreParseError(f"expected reply text, got {type(text).__name__}")
    found: dict[int, int] = {}
    for match in SCORE_LINE.finditer(text):
        idx = int(match["idx"])
        raw = match["score"]
        den = match["den"]
        if den is not None and int(den) != scale_max:
            raise InvalidScoreError(f"action {idx}: score given out of {den}, expected out of {scale_max}", index=idx)
        value = float(raw)
        if not value.is_integer():
            raise InvalidScoreError(f"action {idx}: score {raw!r} is not an integer", index=idx)
        score = int(value)
        if not 0 <= score <= scale_max:
            raise ScoreRangeError(f"action {idx}: score {score} outside [0, {scale_max}]", index=idx)
        if idx >= n:
            raise ExtraScoreError(f"reply scores action {idx} but only {n} actions were asked for", index=idx)
        if idx in found and found[idx] != score:
            raise ConflictingScoreError(f"action {idx} scored twice ({found[idx]} and {score})", index=idx)
        found[idx] = score
    missing = [i for i in range(n) if i not in found]
    if missing:
        what = "no 'Action <i>: <score>' lines found" if not found else f"missing score for action {missing[0]}"
        raise MissingScoreError(what, index=missing[0])
    return [found[i] for i in range(n)]


def normalize(scores, scale_max: int = 10) -> list[float]:
    if scale_max < 1:
        raise ValueError(f"scale_max must be >= 1, got {scale_max}")
    out = []
    for s in scores:
        if not 0 <= s <= scale_max:
            raise ScoreRangeError(f"score {s} outside [0, {scale_max}]")
        out.append(s / scale_max)
    return out


def format_scores(scores) -> str:
    return "\n".join(f"Action {i}: {s}" for i, s in enumerate(scores))
