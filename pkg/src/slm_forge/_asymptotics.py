"""Finite-grid evidence for statements about x -> +inf.

Everything here looks at the last two decades of a sorted positive grid and
compares the change of a sampled quantity across the penultimate and the last
decade. Opposite signs make any extrapolation meaningless, so callers turn
that case into an "inconclusive" verdict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def geometric_grid(lo: float, hi: float, per_decade: int = 10) -> np.ndarray:
    """Log-spaced grid from `lo` to `hi` inclusive."""
    if not (0 < lo < hi):
        raise ValueError(f"need 0 < lo < hi, got lo={lo}, hi={hi}")
    n = int(round(math.log10(hi / lo) * per_decade)) + 1
    return np.geomspace(lo, hi, max(n, 2))


def decades_spanned(xs) -> float:
    xs = np.asarray(xs, dtype=float)
    pos = xs[xs > 0]
    if pos.size < 2:
        return 0.0
    return math.log10(pos[-1] / pos[0])


@dataclass(frozen=True)
class TailTrend:
    x_marks: tuple[float, float, float]
    values: tuple[float, float, float]
    d_pen: float
    d_last: float
    disagree: bool
    ratio: float
    limit: float

    def note(self) -> str:
        xa, xb, xc = self.x_marks
        return (
            f"change {self.d_pen:.6g} over [{xa:.3g}, {xb:.3g}], {self.d_last:.6g} over "
            f"[{xb:.3g}, {xc:.3g}]; increment ratio {self.ratio:.4g}; extrapolated limit {self.limit:.6g}"
        )


def _sign(d: float, scale: float, rtol: float) -> int:
    if abs(d) <= rtol * scale:
        return 0
    return 1 if d > 0 else -1


def tail_trend(xs, values, *, rtol: float = 1e-9, converge_ratio: float = 0.9) -> TailTrend:
    """Extrapolate `values` sampled at sorted positive `xs` towards +inf.

    Increments whose per-decade ratio lies in [0, `converge_ratio`) are summed
    as a geometric series, which is exact for power-law decay; anything slower
    (logarithmic growth has ratio 1) is treated as divergence in the direction
    of the last increment.
    """
    xs = np.asarray(xs, dtype=float)
    vals = np.asarray(values, dtype=float)
    pos = xs > 0
    xs, vals = xs[pos], vals[pos]
    if xs.size < 3:
        raise ValueError("need at least three positive grid points")
    top = xs[-1]
    marks = []
    for target in (top / 100.0, top / 10.0, top):
        j = int(np.searchsorted(xs, target * (1 - 1e-12)))
        marks.append(min(j, xs.size - 1))
    if marks[0] == marks[1]:
        marks[0] = 0
    if marks[1] == marks[2]:
        marks[1] = max(0, marks[2] - 1)
    va, vb, vc = (float(vals[j]) for j in marks)
    d_pen, d_last = vb - va, vc - vb
    scale = max(abs(va), abs(vb), abs(vc), 1e-300)
    s_pen, s_last = _sign(d_pen, scale, rtol), _sign(d_last, scale, rtol)
    disagree = s_pen * s_last < 0
    if s_last == 0:
        ratio, limit = 0.0, vc
    elif s_pen == 0:
        ratio, limit = math.inf, math.copysign(math.inf, d_last)
    else:
        ratio = d_last / d_pen
        if 0 <= ratio < converge_ratio:
            limit = vc + d_last * ratio / (1.0 - ratio)
        else:
            limit = math.copysign(math.inf, d_last)
    return TailTrend(
        x_marks=tuple(float(xs[j]) for j in marks),
        values=(va, vb, vc),
        d_pen=d_pen,
        d_last=d_last,
        disagree=disagree,
        ratio=ratio,
        limit=limit,
    )
