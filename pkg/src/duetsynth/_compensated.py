"""Compensated float64 add/subtract (Knuth TwoSum).

Plain IEEE754 arithmetic does not satisfy ``(a - b) + b == a``, so motion
deltas and normalization offsets carry the rounding residual of the
subtraction that produced them.  Reconstruction then recovers the original
array bit-for-bit.
"""

from __future__ import annotations

import numpy as np


def two_sum(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (s, e) with s = fl(a + b) and s + e == a + b exactly."""
    s = a + b
    bb = s - a
    aa = s - bb
    eb = b - bb
    ea = a - aa
    return s, ea + eb


def sub_with_residual(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (d, r) with d = fl(a - b) and d + r == a - b exactly."""
    return two_sum(a, -b)


def add_exact(b: np.ndarray, d: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Evaluate b + d + r assuming d + r == a - b exactly; returns a bitwise.

    ``r`` is far below the rounding granularity of the final sum, so one
    compensated pass suffices.
    """
    s, e = two_sum(b, d)
    return s + (e + r)
