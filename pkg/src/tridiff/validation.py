"""Input validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


def check_same_shape(a_shape, b_shape, op: str) -> None:
    if tuple(a_shape) != tuple(b_shape):
        raise ShapeError(f"{op}: shape mismatch {tuple(a_shape)} vs {tuple(b_shape)}")


def check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op}: produced non-finite values")


def check_in_range(name: str, value, lo=None, hi=None, lo_open=False, hi_open=False):
    if lo is not None and (value <= lo if lo_open else value < lo):
        raise ValueError(f"{name}={value} out of range (must be {'>' if lo_open else '>='} {lo})")
    if hi is not None and (value >= hi if hi_open else value > hi):
        raise ValueError(f"{name}={value} out of range (must be {'<' if hi_open else '<='} {hi})")
    return value


def as_array(x, dtype=np.float64) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    return np.ascontiguousarray(arr)
