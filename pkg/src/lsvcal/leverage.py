"""Leverage surface: piecewise constant in time, cubic spline in strike."""

from __future__ import annotations

import csv
from bisect import bisect_right

import numpy as np
from scipy.interpolate import CubicSpline

from ._validation import check_sorted

LAMBDA_FLOOR = 1e-8


class LeverageSurface:
    """``lambda(K, t)`` with slice ``j`` active on ``[t_j, t_{j+1})``.

    Each slice is a natural cubic spline through its nodes, held flat outside
    ``[K_min, K_max]`` of that slice. Slices may use different strike nodes.
    """

    def __init__(self, times=(), strikes=(), values=()):
        self.times = []
        self.strikes = []
        self.values = []
        self._splines = []
        for t, K, v in zip(times, strikes, values):
            self.append(t, K, v)

    def __len__(self):
        return len(self.times)

    def append(self, t, strikes, values):
        K = np.array(strikes, float).ravel()
        v = np.array(values, float).ravel()
        if K.shape != v.shape or K.size == 0:
            raise ValueError("strike and leverage arrays must be non-empty and equal length")
        check_sorted(K, "leverage strikes", strict=True)
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ValueError(f"leverage values must be positive and finite at t={t:g}")
        if self.times and t <= self.times[-1]:
            raise ValueError("slices must be appended in increasing time")
        K.flags.writeable = False
        v.flags.writeable = False
        self.times.append(float(t))
        self.strikes.append(K)
        self.values.append(v)
        self._splines.append(CubicSpline(K, v, bc_type="natural") if K.size > 2 else None)

    def slice_index(self, t):
        j = bisect_right(self.times, float(t) + 1e-12) - 1
        if j < 0:
            raise ValueError(f"t={t:g} precedes the first leverage slice")
        return j

    def evaluate_slice(self, j, S):
        S = np.asarray(S, float)
        K, v, spl = self.strikes[j], self.values[j], self._splines[j]
        x = np.clip(S, K[0], K[-1])
        out = spl(x) if spl is not None else np.interp(x, K, v)
        return np.maximum(out, LAMBDA_FLOOR)

    def __call__(self, S, t):
        return self.evaluate_slice(self.slice_index(t), S)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "K", "lambda"])
            for t, K, v in zip(self.times, self.strikes, self.values):
                for k, lam in zip(K, v):
                    writer.writerow([repr(t), repr(float(k)), repr(float(lam))])

    @classmethod
    def from_csv(cls, path):
        rows = {}
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            if header != ["t", "K", "lambda"]:
                raise ValueError(f"{path}: expected header t,K,lambda")
            for row in reader:
                if row:
                    t, k, lam = map(float, row)
                    rows.setdefault(t, []).append((k, lam))
        out = cls()
        for t in sorted(rows):
            pts = sorted(rows[t])
            out.append(t, [p[0] for p in pts], [p[1] for p in pts])
        return out
