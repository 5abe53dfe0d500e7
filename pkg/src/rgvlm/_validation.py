"""Argument checks shared by the estimators and configs."""

from __future__ import annotations

import numbers

from sklearn.exceptions import NotFittedError

__all__ = [
    "NotFittedError",
    "check_int",
    "check_real",
    "check_choice",
    "check_is_fitted",
]


def check_int(name: str, value, *, min_value: int | None = None, max_value: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    value = int(value)
    if min_value is not None and value < min_value:
        raise ValueError(f"{name} must be >= {min_value}, got {value}")
    if max_value is not None and value > max_value:
        raise ValueError(f"{name} must be <= {max_value}, got {value}")
    return value


def check_real(
    name: str,
    value,
    *,
    low: float | None = None,
    high: float | None = None,
    low_open: bool = False,
    high_open: bool = False,
) -> float:
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise TypeError(f"{name} must be a real number, got {type(value).__name__}")
    value = float(value)
    if value != value:
        raise ValueError(f"{name} is NaN")
    if low is not None and (value < low or (low_open and value == low)):
        raise ValueError(f"{name}={value} outside {'(' if low_open else '['}{low}, {high}{')' if high_open else ']'}")
    if high is not None and (value > high or (high_open and value == high)):
        raise ValueError(f"{name}={value} outside {'(' if low_open else '['}{low}, {high}{')' if high_open else ']'}")
    return value


def check_choice(name: str, value, choices) -> str:
    if value not in choices:
        raise ValueError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value


def check_is_fitted(estimator, attribute: str = "params_") -> None:
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(f"{type(estimator).__name__} is not fitted yet; call fit() first")
