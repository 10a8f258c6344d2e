"""Coefficient functions and model specifications.

A coefficient is a finite sum of registered terms (power, log, sin,
exponential decay, capped-linear, tabulated). That covers every drift and
diffusion used by the Lions-Musiela style models, including the drift
families ``K ln x``, ``K sin x``, ``K e^{-ax}`` and ``K x^m`` minus
``rho alpha x^(gamma+delta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from ._asymptotics import tail_trend

X_MAX = 1e6

TERM_KINDS = ("power", "log", "sin", "exp", "min", "tabulated")


class CoefficientEvaluationError(ValueError):
    """A coefficient returned a non-finite value."""

    def __init__(self, name: str, x: float, value: float):
        self.name, self.x, self.value = name, x, value
        super().__init__(f"coefficient evaluation error: {name}({x!r}) = {value!r}")


@dataclass(frozen=True)
class Term:
    """One registered term ``coef * f(x; param)``.

    ========== =====================  ==============
    kind       f(x)                   param
    ========== =====================  ==============
    power      x**param               exponent
    log        ln(x)                  unused
    sin        sin(param * x)         frequency
    exp        exp(-param * x)        decay rate
    min        min(x, param)          cap
    tabulated  linear interpolation   unused
    ========== =====================  ==============
    """

    kind: str
    coef: float = 1.0
    param: float = 0.0
    xs: tuple[float, ...] = ()
    ys: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise ValueError(f"unknown term kind {self.kind!r}")
        if self.kind == "tabulated":
            if len(self.xs) < 2 or len(self.xs) != len(self.ys):
                raise ValueError("tabulated term needs matching xs/ys with at least two points")
            if any(b <= a for a, b in zip(self.xs, self.xs[1:])):
                raise ValueError("tabulated xs must be strictly increasing")

    def __call__(self, x):
        c, p = self.coef, self.param
        if self.kind == "power":
            if p == 0:
                return c * np.ones_like(x) if isinstance(x, np.ndarray) else c
            return c * x**p
        if self.kind == "log":
            return c * np.log(x)
        if self.kind == "sin":
            return c * np.sin(p * x)
        if self.kind == "exp":
            return c * np.exp(-p * x)
        if self.kind == "min":
            return c * np.minimum(x, p)
        return c * np.interp(x, self.xs, self.ys)

    @property
    def has_derivative(self) -> bool:
        return self.kind != "tabulated"

    def derivative(self, x):
        c, p = self.coef, self.param
        if self.kind == "power":
            if p == 0:
                return 0.0 * x
            if p == 1:
                return c + 0.0 * x
            return c * p * x ** (p - 1)
        if self.kind == "log":
            return c / x
        if self.kind == "sin":
            return c * p * np.cos(p * x)
        if self.kind == "exp":
            return -c * p * np.exp(-p * x)
        if self.kind == "min":
            return c * (np.asarray(x) < p)
        raise ValueError("tabulated terms carry no derivative")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind, "coef": self.coef}
        if self.kind == "tabulated":
            d["xs"], d["ys"] = list(self.xs), list(self.ys)
        elif self.kind != "log":
            d["param"] = self.param
        return d

    def describe(self) -> str:
        c = f"{self.coef:g}"
        return {
            "power": f"{c}*x^{self.param:g}",
            "log": f"{c}*ln(x)",
            "sin": f"{c}*sin({self.param:g}x)",
            "exp": f"{c}*exp(-{self.param:g}x)",
            "min": f"{c}*min(x,{self.param:g})",
            "tabulated": f"{c}*table[{len(self.xs)}]",
        }[self.kind]


@dataclass(frozen=True)
class CoefficientFunction:
    """Sum of registered terms, evaluated on scalars or numpy arrays."""

    name: str
    terms: tuple[Term, ...] = ()
    flags: frozenset[str] = field(default_factory=frozenset)

    def __call__(self, x):
        if not self.terms:
            return 0.0 * x
        with np.errstate(all="ignore"):
            out = self.terms[0](x)
            for t in self.terms[1:]:
                out = out + t(x)
        return out

    @property
    def has_derivative(self) -> bool:
        return all(t.has_derivative for t in self.terms)

    def derivative(self, x):
        if not self.terms:
            return 0.0 * x
        with np.errstate(all="ignore"):
            out = self.terms[0].derivative(x)
            for t in self.terms[1:]:
                out = out + t.derivative(x)
        return out

    def __add__(self, other: "CoefficientFunction") -> "CoefficientFunction":
        return CoefficientFunction(f"{self.name}+{other.name}", self.terms + other.terms, self.flags & other.flags)

    def scaled(self, c: float, name: str | None = None) -> "CoefficientFunction":
        terms = tuple(Term(t.kind, t.coef * c, t.param, t.xs, t.ys) for t in self.terms)
        return CoefficientFunction(name or f"{c:g}*{self.name}", terms, self.flags)

    def with_flags(self, *flags: str) -> "CoefficientFunction":
        return CoefficientFunction(self.name, self.terms, self.flags | frozenset(flags))

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "terms": [t.to_dict() for t in self.terms]}

    def describe(self) -> str:
        return " + ".join(t.describe() for t in self.terms) or "0"

    @classmethod
    def from_terms(cls, name: str, specs: Iterable[dict[str, Any]]) -> "CoefficientFunction":
        terms = []
        for s in specs:
            s = dict(s)
            if "xs" in s:
                s["xs"], s["ys"] = tuple(s["xs"]), tuple(s.get("ys", ()))
            terms.append(Term(**s))
        return cls(name, tuple(terms))


def zero(name: str = "0") -> CoefficientFunction:
    return CoefficientFunction(name, ())


def constant(c: float, name: str | None = None) -> CoefficientFunction:
    return CoefficientFunction(name or f"{c:g}", (Term("power", c, 0.0),))


def power(coef: float, exponent: float, name: str | None = None) -> CoefficientFunction:
    return CoefficientFunction(name or f"{coef:g}*x^{exponent:g}", (Term("power", coef, exponent),))


def poly(coefs: dict[float, float], name: str | None = None) -> CoefficientFunction:
    """Generalised polynomial ``sum coef * x**exponent`` from ``{exponent: coef}``."""
    terms = tuple(Term("power", c, p) for p, c in sorted(coefs.items()))
    f = CoefficientFunction("", terms)
    return CoefficientFunction(name or f.describe(), terms)


def log_term(coef: float) -> CoefficientFunction:
    return CoefficientFunction(f"{coef:g}*ln(x)", (Term("log", coef),))


def sin_term(coef: float, freq: float = 1.0) -> CoefficientFunction:
    return CoefficientFunction(f"{coef:g}*sin({freq:g}x)", (Term("sin", coef, freq),))


def exp_decay(coef: float, rate: float) -> CoefficientFunction:
    return CoefficientFunction(f"{coef:g}*exp(-{rate:g}x)", (Term("exp", coef, rate),))


def capped(coef: float, cap: float) -> CoefficientFunction:
    return CoefficientFunction(f"{coef:g}*min(x,{cap:g})", (Term("min", coef, cap),))


def tabulated(xs: Sequence[float], ys: Sequence[float], name: str = "table") -> CoefficientFunction:
    return CoefficientFunction(name, (Term("tabulated", 1.0, 0.0, tuple(map(float, xs)), tuple(map(float, ys))),))


def lm_drift(rho: float, k: float = 1.0) -> CoefficientFunction:
    """``x - rho * x**(k+1)``, the drift paired with ``mu(x) = x**k``."""
    return poly({1.0: 1.0, k + 1.0: -rho}, name=f"x-{rho:g}x^{k + 1:g}")


@dataclass(frozen=True)
class PhiFunction:
    """Increasing positive comparison function on [a, inf)."""

    eval: CoefficientFunction
    a: float = 1.0

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("phi lower limit a must be positive")

    def __call__(self, x):
        return self.eval(x)

    def check_shape(self, grid) -> tuple[bool, str]:
        """Positive and nondecreasing on the grid points >= a."""
        xs = np.asarray(grid, dtype=float)
        xs = xs[xs >= self.a]
        vals = np.asarray(self.eval(xs), dtype=float)
        if not np.all(np.isfinite(vals)):
            return False, "non-finite phi value on grid"
        if np.any(vals <= 0):
            j = int(np.argmax(vals <= 0))
            return False, f"phi({xs[j]:g}) = {vals[j]:g} is not positive"
        drops = np.diff(vals) < 0
        if np.any(drops):
            j = int(np.argmax(drops))
            return False, f"phi decreases between {xs[j]:g} and {xs[j + 1]:g}"
        return True, "positive and nondecreasing on grid"


@dataclass(frozen=True)
class VolatilityModelSpec:
    """``dS = S^beta v^delta dB``, ``dv = mu(v) dW + b(v) dt`` with ``d[B,W] = rho dt``.

    The basic family has ``beta = delta = 1``; the power family fixes
    ``mu(x) = alpha * x**gamma``.
    """

    mu: CoefficientFunction
    b: CoefficientFunction
    rho: float
    family: str = "basic"
    S0: float = 1.0
    v0: float = 1.0
    T: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        if self.family not in ("basic", "power"):
            raise ValueError(f"unknown model family {self.family!r}")
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [-1, 1], got {self.rho}")
        for name in ("S0", "v0", "T"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.family == "power":
            for name in ("alpha", "beta", "gamma", "delta"):
                if not getattr(self, name) > 0:
                    raise ValueError(f"power family needs {name} > 0, got {getattr(self, name)}")

    @property
    def is_power(self) -> bool:
        return self.family == "power"

    def s_vol(self, S, v):
        """Diffusion of S per unit of S: ``S^(beta-1) v^delta``."""
        if not self.is_power:
            return v
        vol = v**self.delta
        if self.beta != 1.0:
            vol = vol * S ** (self.beta - 1.0)
        return vol

    def s_diffusion(self, S, v):
        return S * self.s_vol(S, v)

    def martingale_numerator(self, x):
        """``rho x mu(x) + b(x)``; ``rho alpha x^(gamma+delta) + b(x)`` for the power family."""
        with np.errstate(all="ignore"):
            if self.is_power:
                return self.rho * self.alpha * x ** (self.gamma + self.delta) + self.b(x)
            return self.rho * x * self.mu(x) + self.b(x)

    def eps_terms(self, x):
        """The pair multiplied by min(eps) and max(eps) in the strict-LM liminf."""
        with np.errstate(all="ignore"):
            if self.is_power:
                return x ** (2 * self.gamma), x**self.gamma
            m = self.mu(x)
            return m * m, m

    @property
    def tau_scales(self) -> tuple[float, float]:
        """Factors on k and on (rho H + J) in the tau thresholds (alpha^2, alpha for the power family)."""
        if self.is_power:
            return self.alpha**2, self.alpha
        return 1.0, 1.0

    def to_dict(self) -> dict[str, Any]:
        d = {
            "family": self.family,
            "mu": self.mu.to_dict(),
            "b": self.b.to_dict(),
            "rho": self.rho,
            "S0": self.S0,
            "v0": self.v0,
            "T": self.T,
        }
        if self.is_power:
            d.update(alpha=self.alpha, beta=self.beta, gamma=self.gamma, delta=self.delta)
        return d


def basic_model(mu, b, rho, *, S0=1.0, v0=1.0, T=1.0) -> VolatilityModelSpec:
    return VolatilityModelSpec(mu=mu, b=b, rho=rho, S0=S0, v0=v0, T=T)


def lm_model(rho: float = 0.5, k: float = 1.0, **kw) -> VolatilityModelSpec:
    """``mu(x) = x**k``, ``b(x) = x - rho x**(k+1)``: a martingale that enlargement can break."""
    return basic_model(power(1.0, k), lm_drift(rho, k), rho, **kw)


def make_power_family(alpha, beta, gamma, delta, b: CoefficientFunction, rho: float, *, S0=1.0, v0=1.0, T=1.0):
    for name, val in (("alpha", alpha), ("beta", beta), ("gamma", gamma), ("delta", delta)):
        if not val > 0:
            raise ValueError(f"power family needs {name} > 0, got {val}")
    mu = power(alpha, gamma, name=f"{alpha:g}*x^{gamma:g}").with_flags("volatility-diffusion")
    return VolatilityModelSpec(
        mu=mu, b=b, rho=rho, family="power", S0=S0, v0=v0, T=T,
        alpha=alpha, beta=beta, gamma=gamma, delta=delta,
    )


def power_family_drift(kind: str, rho: float, alpha: float, gamma: float, delta: float, K: float = 1.0, a: float = 1.0, m: float = 1.0):
    """The drift families ``K f(x) - rho alpha x^(gamma+delta)`` with f in {ln, sin, exp(-a x), x^m}."""
    head = {
        "log": log_term(K),
        "sin": sin_term(K),
        "exp": exp_decay(K, a),
        "power": power(K, m),
    }[kind]
    tail = power(-rho * alpha, gamma + delta)
    return CoefficientFunction(f"{head.name}-{rho * alpha:g}x^{gamma + delta:g}", head.terms + tail.terms)


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class AssumptionCheck:
    name: str
    passed: bool
    witness: float | None = None
    detail: str = ""
    estimate: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "passed": self.passed,
            "witness": self.witness,
            "detail": self.detail,
            "estimate": self.estimate,
        }


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[AssumptionCheck, ...]
    growth_constant: float
    lipschitz_estimate: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> AssumptionCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        return {
            "passed": self.passed,
            "growth_constant": self.growth_constant,
            "lipschitz_estimate": self.lipschitz_estimate,
            "checks": [c.to_dict() for c in self.checks],
        }


def _evaluate(f: CoefficientFunction, xs: np.ndarray) -> np.ndarray:
    vals = np.asarray(f(xs), dtype=float) * np.ones_like(xs)
    bad = ~np.isfinite(vals)
    if np.any(bad):
        j = int(np.argmax(bad))
        raise CoefficientEvaluationError(f.name, float(xs[j]), float(vals[j]))
    return vals


def _tail_grows(xs: np.ndarray, vals: np.ndarray) -> bool:
    tr = tail_trend(xs, vals)
    return tr.limit == math.inf


def validate_coefficients(spec: VolatilityModelSpec, grid, *, x_max: float = X_MAX) -> ValidationReport:
    """Check mu(0)=0, b(0)>=0, mu>0 on x>0, one-sided linear growth of b and a Lipschitz estimate for mu.

    Growth and Lipschitz verdicts are read from the last two decades of the
    grid; the Lipschitz entry is flagged as an estimate.
    """
    xs = np.asarray(grid, dtype=float)
    if xs.size == 0:
        raise ValueError("grid must be nonempty")
    if np.any(np.diff(xs) <= 0):
        raise ValueError("grid must be strictly increasing")
    if xs[0] < 0 or xs[-1] > x_max:
        raise ValueError(f"grid must lie inside [0, {x_max:g}]")

    zero_pt = np.array([0.0])
    mu0 = float(_evaluate(spec.mu, zero_pt)[0])
    b0 = float(_evaluate(spec.b, zero_pt)[0])
    mu = _evaluate(spec.mu, xs)
    b = _evaluate(spec.b, xs)
    checks = [
        AssumptionCheck("mu(0)=0", abs(mu0) <= 1e-12, None if abs(mu0) <= 1e-12 else 0.0, f"mu(0) = {mu0:g}"),
        AssumptionCheck("b(0)>=0", b0 >= 0, None if b0 >= 0 else 0.0, f"b(0) = {b0:g}"),
    ]

    pos = xs > 0
    bad = pos & ~(mu > 0)
    checks.append(
        AssumptionCheck(
            "mu>0 on x>0",
            not bad.any(),
            float(xs[np.argmax(bad)]) if bad.any() else None,
            "checked on grid points x > 0",
        )
    )

    ratio = b / (1.0 + xs)
    C = float(max(0.0, ratio.max()))
    # one-sided bound: only positive values of b can break it
    grows = pos.sum() >= 3 and _tail_grows(xs[pos], np.maximum(ratio[pos], 0.0))
    checks.append(
        AssumptionCheck(
            "b(x)<=C(1+x)",
            not grows,
            float(xs[pos][-1]) if grows else None,
            f"fitted C = {C:.6g}" + ("; b/(1+x) still growing on the last two decades" if grows else ""),
        )
    )

    L = math.nan
    lip_ok = True
    witness = None
    if xs.size >= 2:
        slopes = np.abs(np.diff(mu) / np.diff(xs))
        L = float(slopes.max())
        mids = 0.5 * (xs[1:] + xs[:-1])
        if (mids > 0).sum() >= 3:
            grows = _tail_grows(mids[mids > 0], slopes[mids > 0])
            if grows:
                lip_ok, witness = False, float(mids[-1])
    checks.append(
        AssumptionCheck(
            "mu Lipschitz",
            lip_ok,
            witness,
            f"max finite-difference slope {L:.6g}" + ("" if lip_ok else "; slope grows with the grid"),
            estimate=True,
        )
    )
    return ValidationReport(tuple(checks), C, L)
