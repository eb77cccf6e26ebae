"""Small input validation helpers shared by the public constructors."""

import numbers

import numpy as np


def check_finite(x, name):
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return x


def check_positive(x, name, strict=True):
    arr = np.asarray(x, dtype=float)
    ok = arr > 0 if strict else arr >= 0
    if not np.all(ok & np.isfinite(arr)):
        raise ValueError(f"{name} must be {'positive' if strict else 'non-negative'}")
    return x


def check_sorted(x, name, strict=True):
    arr = np.asarray(x, dtype=float)
    d = np.diff(arr)
    if np.any(d <= 0 if strict else d < 0):
        raise ValueError(f"{name} must be {'strictly ' if strict else ''}increasing")
    return x


def check_in_range(x, name, lo, hi, lo_open=False, hi_open=False):
    v = float(x)
    below = v <= lo if lo_open else v < lo
    above = v >= hi if hi_open else v > hi
    if below or above or not np.isfinite(v):
        lb = "(" if lo_open else "["
        rb = ")" if hi_open else "]"
        raise ValueError(f"{name}={v!r} outside {lb}{lo}, {hi}{rb}")
    return v


def check_int(x, name, minimum=None):
    if isinstance(x, bool) or not isinstance(x, numbers.Integral):
        raise ValueError(f"{name} must be an integer")
    if minimum is not None and x < minimum:
        raise ValueError(f"{name} must be >= {minimum}")
    return int(x)
