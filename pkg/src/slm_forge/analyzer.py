"""Numerical checks of the asymptotic martingale conditions and of Feller's
scale-function explosion test.

Limit statements are decided from finite evidence on a geometric grid and
therefore come with a three-valued verdict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import integrate, optimize

from ._asymptotics import decades_spanned, geometric_grid, tail_trend
from .coeffs import X_MAX, PhiFunction, VolatilityModelSpec

SATISFIED, VIOLATED, INCONCLUSIVE = "satisfied", "violated", "inconclusive"
NO_EXPLOSION, POSSIBLE_EXPLOSION = "NoExplosion", "PossibleExplosion"

DIVERGENCE_CAP = 1e12
MIN_DECADES = 6.0
STRICT_FLOOR = 1e-9


@dataclass(frozen=True)
class AsymptoticVerdict:
    quantity: str
    trend_values: tuple[tuple[float, float], ...]
    verdict: str
    extrapolation_note: str
    limit: float = math.nan

    @property
    def satisfied(self) -> bool:
        return self.verdict == SATISFIED

    def to_dict(self) -> dict[str, Any]:
        xs, vals = zip(*self.trend_values) if self.trend_values else ((), ())
        return {
            "quantity": self.quantity,
            "grid": list(xs),
            "values": [v if math.isfinite(v) else str(v) for v in vals],
            "verdict": self.verdict,
            "note": self.extrapolation_note,
            "limit": self.limit if math.isfinite(self.limit) else str(self.limit),
        }


def default_grid() -> np.ndarray:
    return geometric_grid(1.0, X_MAX, per_decade=10)


def _prepare_grid(grid) -> np.ndarray:
    xs = default_grid() if grid is None else np.asarray(grid, dtype=float)
    if np.any(np.diff(xs) <= 0) or np.any(xs <= 0):
        raise ValueError("asymptotic grid must be positive and strictly increasing")
    if decades_spanned(xs) < MIN_DECADES - 1e-9:
        raise ValueError(f"asymptotic grid must span at least {MIN_DECADES:g} decades")
    return xs


def _pairs(xs, vals) -> tuple[tuple[float, float], ...]:
    return tuple((float(x), float(v)) for x, v in zip(xs, vals))


def lm_martingale_check(spec: VolatilityModelSpec, grid=None) -> AsymptoticVerdict:
    """Is ``(rho x mu(x) + b(x)) / x`` bounded above as x grows?"""
    xs = _prepare_grid(grid)
    with np.errstate(all="ignore"):
        vals = np.asarray(spec.martingale_numerator(xs), dtype=float) / xs
    name = "limsup (rho x mu + b)/x"
    if not np.all(np.isfinite(vals)):
        j = int(np.argmax(~np.isfinite(vals)))
        return AsymptoticVerdict(name, _pairs(xs, vals), INCONCLUSIVE, f"overflow at x = {xs[j]:g}")
    tr = tail_trend(xs, vals)
    if tr.disagree:
        return AsymptoticVerdict(name, _pairs(xs, vals), INCONCLUSIVE, "trend changes sign; " + tr.note(), tr.limit)
    verdict = SATISFIED if tr.limit < math.inf else VIOLATED
    return AsymptoticVerdict(name, _pairs(xs, vals), verdict, tr.note(), tr.limit)


def strict_numerator(spec: VolatilityModelSpec, eps1: float, eps2: float, x):
    quad, lin = spec.eps_terms(x)
    lo, hi = min(eps1, eps2), max(eps1, eps2)
    with np.errstate(all="ignore"):
        return spec.martingale_numerator(x) + lo * quad - hi * lin


def lm_strict_check(
    spec: VolatilityModelSpec,
    phi: PhiFunction,
    eps1: float,
    eps2: float,
    grid=None,
    *,
    floor: float = STRICT_FLOOR,
) -> AsymptoticVerdict:
    """Is the eps-perturbed numerator divided by phi bounded away from 0 as x grows?"""
    if eps1 < 0 or eps2 < 0:
        raise ValueError("eps1 and eps2 must be nonnegative")
    xs = _prepare_grid(grid)
    with np.errstate(all="ignore"):
        ph = np.asarray(phi(xs), dtype=float) * np.ones_like(xs)
    if np.any(~(ph > 0)):
        j = int(np.argmax(~(ph > 0)))
        raise ValueError(f"phi must be positive, phi({xs[j]:g}) = {ph[j]:g}")
    with np.errstate(all="ignore"):
        vals = np.asarray(strict_numerator(spec, eps1, eps2, xs), dtype=float) / ph
    name = "liminf (rho x mu + b + min(eps) mu^2 - max(eps) mu)/phi"
    if not np.all(np.isfinite(vals)):
        j = int(np.argmax(~np.isfinite(vals)))
        return AsymptoticVerdict(name, _pairs(xs, vals), INCONCLUSIVE, f"overflow at x = {xs[j]:g}")
    tr = tail_trend(xs, vals)
    if tr.disagree:
        return AsymptoticVerdict(name, _pairs(xs, vals), INCONCLUSIVE, "trend changes sign; " + tr.note(), tr.limit)
    tail = vals[xs >= tr.x_marks[0]]
    ok = bool(np.all(tail > floor)) and tr.limit > floor
    return AsymptoticVerdict(name, _pairs(xs, vals), SATISFIED if ok else VIOLATED, tr.note() + f"; floor {floor:g}", tr.limit)


def power_family_check(
    spec: VolatilityModelSpec, phi: PhiFunction, eps1: float, eps2: float, grid=None
) -> tuple[AsymptoticVerdict, AsymptoticVerdict]:
    """(martingale, strict) verdicts for the power family; needs rho > 0 and gamma + delta > 1."""
    if not spec.is_power:
        raise ValueError("power-family model required")
    if not (spec.rho > 0 and spec.gamma + spec.delta > 1):
        raise ValueError(
            f"precondition rho > 0, gamma + delta > 1 not met (rho={spec.rho:g}, gamma+delta={spec.gamma + spec.delta:g})"
        )
    return lm_martingale_check(spec, grid), lm_strict_check(spec, phi, eps1, eps2, grid)


# --------------------------------------------------------------------------
# integrability of 1/phi


@dataclass(frozen=True)
class IntegrabilityResult:
    status: str  # integrable | divergent | inconclusive
    value: float = math.nan
    error: float = math.nan
    tail_exponent: float = math.nan
    note: str = ""

    def to_dict(self) -> dict[str, Any]:
        f = lambda v: v if math.isfinite(v) else str(v)  # noqa: E731
        return {
            "status": self.status,
            "value": f(self.value),
            "error": f(self.error),
            "tail_exponent": f(self.tail_exponent),
            "note": self.note,
        }


def phi_integrability(phi: PhiFunction, *, x_max: float = X_MAX, exponent_tol: float = 1e-3) -> IntegrabilityResult:
    """Decide whether ``int_a^inf dx / phi(x)`` is finite.

    The body ``[a, x_max]`` is integrated decade by decade in the log variable;
    the tail is a power law with the exponent measured over the last decade.
    """
    a = phi.a
    if not x_max > a:
        raise ValueError("x_max must exceed the lower limit a")
    grid = geometric_grid(a, x_max, per_decade=20)
    ok, why = phi.check_shape(grid)
    if not ok:
        return IntegrabilityResult("inconclusive", note=why)

    def g(u):
        x = math.exp(u)
        return x / float(phi(x))

    edges = np.unique(np.concatenate([np.log(geometric_grid(a, x_max, per_decade=1)), [math.log(x_max)]]))
    value, err = 0.0, 0.0
    for u0, u1 in zip(edges[:-1], edges[1:]):
        v, e = integrate.quad(g, u0, u1, epsabs=1e-14, epsrel=1e-12, limit=200)
        value += v
        err += e

    def slope(x_lo, x_hi):
        return math.log(float(phi(x_hi)) / float(phi(x_lo))) / math.log(x_hi / x_lo)

    p_last = slope(x_max / 10.0, x_max)
    p_pen = slope(x_max / 100.0, x_max / 10.0) if x_max / 100.0 >= a else p_last
    if p_last <= 1.0 + exponent_tol:
        return IntegrabilityResult(
            "divergent", value=math.inf, tail_exponent=p_last,
            note=f"tail exponent {p_last:.6g} <= 1; partial integral {value:.6g} up to {x_max:g}",
        )
    tail = x_max / float(phi(x_max)) / (p_last - 1.0)
    # spread between two exponent estimates as the tail's model error
    alt = x_max / float(phi(x_max)) / (p_pen - 1.0) if p_pen > 1.0 else math.inf
    tail_err = abs(alt - tail)
    return IntegrabilityResult(
        "integrable", value=value + tail, error=err + tail_err, tail_exponent=p_last,
        note=f"body {value:.12g} on [{a:g}, {x_max:g}], power-law tail {tail:.6g}",
    )


# --------------------------------------------------------------------------
# Feller scale function


class FellerSingularityError(ValueError):
    def __init__(self, point: float):
        self.point = point
        super().__init__(f"mu vanishes inside the domain at x = {point:.12g}; scale density is singular there")


@dataclass(frozen=True)
class BoundaryValue:
    divergent: bool
    value: float = math.nan  # signed p(boundary) when finite
    log_abs: float = math.nan
    note: str = ""

    def to_dict(self) -> dict[str, Any]:
        if self.divergent:
            return {"divergent": True, "log_abs_at_stop": self.log_abs, "note": self.note}
        return {"divergent": False, "value": self.value, "note": self.note}


@dataclass(frozen=True)
class ScaleFunctionResult:
    p_at_upper: BoundaryValue
    p_at_lower: BoundaryValue
    classification: str
    quadrature_error_estimate: float
    domain: tuple[float, float] = (0.0, math.inf)
    c: float = 1.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "p_at_upper": self.p_at_upper.to_dict(),
            "p_at_lower": self.p_at_lower.to_dict(),
            "classification": self.classification,
            "quadrature_error_estimate": self.quadrature_error_estimate,
            "domain": [str(d) if not math.isfinite(d) else d for d in self.domain],
            "c": self.c,
        }


def _outer_points(c: float, bound: float, max_segments: int):
    """Segment endpoints from c towards `bound`: doubling distance for an
    infinite bound, halving the remaining gap for a finite one."""
    sign = 1.0 if bound > c else -1.0
    if math.isinf(bound):
        scale = max(1.0, abs(c))
        for j in range(1, max_segments + 1):
            x = c + sign * scale * (2.0**j - 1.0)
            if not math.isfinite(x):
                return
            yield x
    else:
        gap = abs(bound - c)
        for j in range(1, max_segments + 1):
            x = bound - sign * gap * 2.0**-j
            if x == bound or x == c:
                return
            yield x


def _check_mu(mu, x0: float, x1: float, n: int = 33):
    xs = np.linspace(x0, x1, n)
    with np.errstate(all="ignore"):
        m = np.asarray(mu(xs), dtype=float) * np.ones_like(xs)
    zero = m == 0
    if zero.any():
        raise FellerSingularityError(float(xs[np.argmax(zero)]))
    s = np.sign(m)
    flips = np.nonzero(s[1:] != s[:-1])[0]
    if flips.size:
        j = int(flips[0])
        root = optimize.brentq(lambda x: float(mu(x)), xs[j], xs[j + 1], xtol=1e-14)
        raise FellerSingularityError(root)


def _side(spec, c, bound, *, cap, max_segments, max_jump=30.0, rel_stop=1e-10):
    """Integrate the scale density from c towards `bound`.

    Returns (BoundaryValue, relative quadrature error). Everything is carried
    in log space: log_s0 is the log scale density at the current left point.
    """
    mu, b = spec.mu, spec.b

    def g(y):
        m = float(mu(y))
        return float(b(y)) / (m * m)

    log_cap = math.log(cap)
    log_s0 = 0.0
    log_p = -math.inf
    log_err = -math.inf
    contribs: list[float] = []
    left = c
    sign = 1.0 if bound > c else -1.0
    note = ""

    def stop(divergent, why):
        err = math.exp(log_err - log_p) if math.isfinite(log_p) else math.nan
        if divergent:
            return BoundaryValue(True, log_abs=log_p, note=why), err
        val = sign * math.exp(log_p) if math.isfinite(log_p) else 0.0
        return BoundaryValue(False, value=val, log_abs=log_p, note=why), err

    for right in _outer_points(c, bound, max_segments):
        _check_mu(mu, left, right)
        pieces = [(left, right)]
        seg_log = -math.inf
        ok = True
        while pieces:
            x0, x1 = pieces.pop()
            dI, _ = integrate.quad(g, x0, x1, limit=200)
            if not math.isfinite(dI):
                ok = False
                break
            if abs(2.0 * dI) > max_jump and abs(x1 - x0) > 1e-12 * max(1.0, abs(x0)):
                mid = 0.5 * (x0 + x1)
                pieces.extend([(mid, x1), (x0, mid)])
                continue

            def s_rel(psi, x0=x0):
                inner, _ = integrate.quad(g, x0, psi, limit=200)
                return math.exp(-2.0 * inner)

            lo, hi = (x0, x1) if x0 < x1 else (x1, x0)
            val, err = integrate.quad(s_rel, lo, hi, limit=200)
            if not (math.isfinite(val) and val > 0):
                ok = False
                break
            piece_log = log_s0 + math.log(val)
            seg_log = np.logaddexp(seg_log, piece_log)
            if err > 0:
                log_err = float(np.logaddexp(log_err, log_s0 + math.log(err)))
            log_s0 -= 2.0 * dI
        if not ok:
            note = f"coefficient evaluation stopped being finite near x = {left:.6g}"
            break
        contribs.append(float(seg_log))
        log_p = float(np.logaddexp(log_p, seg_log))
        left = right
        if len(contribs) >= 3:
            r1 = contribs[-1] - contribs[-2]
            r2 = contribs[-2] - contribs[-3]
            growing = r1 >= 0.0 and r2 >= 0.0
            if log_p > log_cap and growing:
                return stop(True, f"|p| exceeded {cap:g} at x = {right:.6g} with nondecreasing increments")
            r = math.exp(max(r1, r2))
            if r < 0.95:
                tail_log = contribs[-1] + math.log(r / (1.0 - r))
                if tail_log < log_p + math.log(rel_stop):
                    return stop(False, f"increments decay geometrically (ratio {r:.3g}) by x = {right:.6g}")
    else:
        note = "segment budget exhausted"

    if len(contribs) >= 2:
        r1 = contribs[-1] - contribs[-2]
        if r1 >= 0.0:
            return stop(True, note + f"; increments still nondecreasing at x = {left:.6g}")
        return stop(False, note + f"; increments decaying at x = {left:.6g}")
    return stop(True, note)


def feller_scale_classify(
    spec: VolatilityModelSpec,
    c: float = 1.0,
    lower: float = 0.0,
    upper: float = math.inf,
    *,
    divergence_cap: float = DIVERGENCE_CAP,
    max_segments: int = 1100,
) -> ScaleFunctionResult:
    """Evaluate ``p(x) = int_c^x exp(-2 int_c^psi b/mu^2) dpsi`` at both ends of (lower, upper).

    NoExplosion iff both ends diverge. The default domain (0, inf) suits a
    volatility; pass ``lower=-math.inf`` for the whole real line.
    """
    if not lower < c < upper:
        raise ValueError(f"need lower < c < upper, got {lower}, {c}, {upper}")
    if float(spec.mu(c)) == 0.0:
        raise FellerSingularityError(c)
    up, e_up = _side(spec, c, upper, cap=divergence_cap, max_segments=max_segments)
    lo, e_lo = _side(spec, c, lower, cap=divergence_cap, max_segments=max_segments)
    cls = NO_EXPLOSION if (up.divergent and lo.divergent) else POSSIBLE_EXPLOSION
    errs = [e for e in (e_up, e_lo) if math.isfinite(e)]
    return ScaleFunctionResult(up, lo, cls, max(errs) if errs else math.nan, (lower, upper), c)
