"""Experiment configuration: TOML (nested tables) or JSON, validated by pydantic.

Models and enlargements are referenced by name. A name resolves first to
an entry in the config's own ``[models]`` / ``[enlargements]`` tables, then
to a built-in preset.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, PositiveInt, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .coeffs import (
    CoefficientFunction,
    PhiFunction,
    Term,
    VolatilityModelSpec,
    basic_model,
    constant,
    lm_model,
    make_power_family,
    power_family_drift,
    zero,
)
from .engine import ExplosionBarrier, TimeGrid
from .enlargement import KINDS, RULES, EnlargementSpec, GirsanovAllocation
from .jumps import JumpDriver, JumpModelSpec

EXPERIMENTS = ("analyze", "feller", "simulate", "defect", "compare", "jumps", "validate-q")


class ConfigError(ValueError):
    """Config problem tied to one field (dotted path)."""

    def __init__(self, field: str, message: str):
        self.field = field
        self.message = message
        super().__init__(f"{field}: {message}")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TermConfig(_Strict):
    kind: Literal["power", "log", "sin", "exp", "min", "tabulated"]
    coef: float = 1.0
    param: float = 0.0
    xs: list[float] = Field(default_factory=list)
    ys: list[float] = Field(default_factory=list)

    def build(self) -> Term:
        return Term(self.kind, self.coef, self.param, tuple(self.xs), tuple(self.ys))


def _coef(name: str, terms: list[TermConfig]) -> CoefficientFunction:
    return CoefficientFunction(name, tuple(t.build() for t in terms))


class ModelConfig(_Strict):
    """One model. ``family`` picks the constructor; unused fields are ignored."""

    family: Literal["lm", "gbm", "basic", "power", "power_preset", "inverse_bessel"]
    rho: float = Field(0.5, ge=-1.0, le=1.0)
    k: float = Field(1.0, gt=0)
    mu: list[TermConfig] | None = None
    b: list[TermConfig] | None = None
    alpha: float = Field(1.0, gt=0)
    beta: float = Field(1.0, gt=0)
    gamma: float = Field(1.0, gt=0)
    delta: float = Field(1.0, gt=0)
    drift_kind: Literal["log", "sin", "exp", "power"] = "power"
    K: float = 1.0
    a: float = 1.0
    m: float = 1.0
    sigma: float = Field(1.0, ge=0)
    S0: float = Field(1.0, gt=0)
    v0: float = Field(1.0, gt=0)
    T: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _needs_terms(self):
        if self.family == "basic" and (self.mu is None or self.b is None):
            raise ValueError("family 'basic' needs mu and b term lists")
        return self

    @property
    def is_scalar(self) -> bool:
        return self.family == "inverse_bessel"

    def build(self) -> VolatilityModelSpec:
        kw = dict(S0=self.S0, v0=self.v0, T=self.T)
        if self.family == "lm":
            return lm_model(self.rho, self.k, **kw)
        if self.family == "gbm":
            # v stays at v0: no noise, no drift
            return basic_model(zero(), zero(), 0.0, **kw)
        if self.family == "basic":
            return basic_model(_coef("mu", self.mu), _coef("b", self.b), self.rho, **kw)
        if self.family == "power":
            b = _coef("b", self.b) if self.b is not None else constant(0.0)
            return make_power_family(self.alpha, self.beta, self.gamma, self.delta, b, self.rho, **kw)
        if self.family == "power_preset":
            b = power_family_drift(self.drift_kind, self.rho, self.alpha, self.gamma, self.delta, self.K, self.a, self.m)
            return make_power_family(self.alpha, self.beta, self.gamma, self.delta, b, self.rho, **kw)
        raise ConfigError("model.family", f"{self.family} is a scalar model without (S, v) dynamics")

    def scalar_sigma(self):
        """``sigma(x)`` for ``dX = X sigma(X) dB``; the inverse Bessel-3 has sigma(x) = x."""
        s = self.sigma
        return lambda x: s * x


class EnlargementConfig(_Strict):
    kind: Literal[KINDS]  # type: ignore[valid-type]
    level: float = 1.0
    threshold: float = 0.0
    hitting_cap: float | None = None

    def build(self, T: float, guard: float | None) -> EnlargementSpec:
        return EnlargementSpec(self.kind, self.level, self.threshold, T, guard, self.hitting_cap)


class NumericsConfig(_Strict):
    seed: int = Field(ge=0)
    n_paths: PositiveInt = 10_000
    h: float = Field(2.0**-8, gt=0)
    barrier: list[float] = Field(default_factory=lambda: [1e2, 1e3, 1e4, 1e6])
    scheme: Literal["euler", "milstein"] = "euler"
    eps1: float = Field(0.05, gt=0)
    eps2: float = Field(1.0, gt=0)
    delta_guard: float | None = Field(None, gt=0)
    confidence: float = Field(0.95, gt=0, lt=1)
    t_eval: list[float] | None = None
    allocation: Literal[RULES] = "J_zero"  # type: ignore[valid-type]
    theta: float = Field(0.5, ge=0, le=1)
    refine: bool = True
    antithetic: bool = False
    zero_noise: bool = False
    hs: list[float] = Field(default_factory=lambda: [2.0**-6, 2.0**-8, 2.0**-10])

    @field_validator("barrier")
    @classmethod
    def _levels(cls, v):
        if not v or any(not x > 0 for x in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("barrier levels must be positive and strictly increasing")
        return v

    @field_validator("hs")
    @classmethod
    def _hs(cls, v):
        if not v or any(not x > 0 for x in v):
            raise ValueError("step sizes must be positive")
        return v


class AnalysisConfig(_Strict):
    phi: list[TermConfig] = Field(default_factory=lambda: [TermConfig(kind="power", coef=1.0, param=2.0)])
    phi_a: float = Field(1.0, gt=0)
    eps: list[float] = Field(default_factory=lambda: [0.1, 0.1])
    x_max: float = Field(1e6, ge=1e6)
    feller_c: float = 1.0
    feller_lower: float = 0.0

    @field_validator("eps")
    @classmethod
    def _eps(cls, v):
        if len(v) not in (1, 2) or any(x < 0 for x in v):
            raise ValueError("eps must be one or two nonnegative numbers")
        return v

    def phi_function(self) -> PhiFunction:
        return PhiFunction(_coef("phi", self.phi), self.phi_a)


class JumpsConfig(_Strict):
    intensity: float = Field(1.0, ge=0)
    sizes: list[float] = Field(default_factory=lambda: [1.0])
    probs: list[float] = Field(default_factory=lambda: [1.0])
    sigma_c: float = Field(0.0, ge=0)
    alpha_exp: float = Field(1.0, gt=0)
    guard: bool = True

    def driver(self) -> JumpDriver:
        return JumpDriver(self.intensity, tuple(self.sizes), tuple(self.probs), self.sigma_c)


class OutputConfig(_Strict):
    dir: str | None = None
    formats: list[Literal["json", "csv"]] = Field(default_factory=lambda: ["json", "csv"])


PRESET_MODELS: dict[str, dict[str, Any]] = {
    "lm": {"family": "lm", "rho": 0.5, "k": 1.0},
    "gbm": {"family": "gbm"},
    "inverse_bessel": {"family": "inverse_bessel"},
}
PRESET_ENLARGEMENTS: dict[str, dict[str, Any]] = {kind: {"kind": kind} for kind in KINDS}


class ExperimentConfig(_Strict):
    experiment: Literal[EXPERIMENTS]  # type: ignore[valid-type]
    model: str
    enlargement: str | None = None
    models: dict[str, ModelConfig] = Field(default_factory=dict)
    enlargements: dict[str, EnlargementConfig] = Field(default_factory=dict)
    numerics: NumericsConfig
    analysis: AnalysisConfig = Field(default_factory=AnalysisConfig)
    jumps: JumpsConfig = Field(default_factory=JumpsConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @model_validator(mode="after")
    def _resolve(self):
        if self.model not in self.models and self.model not in PRESET_MODELS:
            raise ConfigError("model", f"unresolved model reference {self.model!r}")
        if self.enlargement is not None and self.enlargement not in self.enlargements and self.enlargement not in PRESET_ENLARGEMENTS:
            raise ConfigError("enlargement", f"unresolved enlargement reference {self.enlargement!r}")
        if self.experiment in ("compare", "validate-q") and self.enlargement is None:
            raise ConfigError("enlargement", f"experiment {self.experiment} needs an enlargement")
        if self.model_config_entry().is_scalar and self.experiment not in ("defect", "simulate"):
            raise ConfigError("model", f"scalar model cannot run experiment {self.experiment}")
        return self

    # -- resolution --------------------------------------------------------

    def model_config_entry(self) -> ModelConfig:
        if self.model in self.models:
            return self.models[self.model]
        return ModelConfig(**PRESET_MODELS[self.model])

    def enlargement_entry(self) -> EnlargementConfig | None:
        if self.enlargement is None:
            return None
        if self.enlargement in self.enlargements:
            return self.enlargements[self.enlargement]
        return EnlargementConfig(**PRESET_ENLARGEMENTS[self.enlargement])

    def build_model(self) -> VolatilityModelSpec:
        return self.model_config_entry().build()

    def build_enlargement(self) -> EnlargementSpec | None:
        e = self.enlargement_entry()
        if e is None:
            return None
        T = self.model_config_entry().T
        try:
            return e.build(T, self.numerics.delta_guard)
        except ValueError as err:
            raise ConfigError("enlargement", str(err)) from None

    def build_grid(self) -> TimeGrid:
        T = self.model_config_entry().T
        n = T / self.numerics.h
        if abs(n - round(n)) > 1e-9 * max(n, 1.0):
            raise ConfigError("numerics.h", f"T = {T} is not a whole number of steps of {self.numerics.h}")
        return TimeGrid(T, int(round(n)))

    def build_barrier(self) -> ExplosionBarrier:
        return ExplosionBarrier(tuple(self.numerics.barrier))

    def build_allocation(self) -> GirsanovAllocation:
        return GirsanovAllocation(self.numerics.allocation, self.numerics.theta, self.numerics.eps2)

    def build_jump_model(self) -> JumpModelSpec:
        return JumpModelSpec(self.build_model(), self.jumps.alpha_exp)

    def t_evals(self) -> list[float]:
        T = self.model_config_entry().T
        ts = self.numerics.t_eval or [T]
        for t in ts:
            if not 0 < t <= T:
                raise ConfigError("numerics.t_eval", f"evaluation time {t} outside (0, {T}]")
        return ts

    def canonical(self) -> dict[str, Any]:
        """JSON-ready dict used for hashing (all defaults filled in)."""
        return self.model_dump(mode="json")


def load_raw(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as err:
        raise ConfigError("config", f"cannot read {p}: {err.strerror}") from None
    try:
        if p.suffix.lower() == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as err:
        raise ConfigError("config", f"parse error: {err}") from None


def parse_config(raw: dict[str, Any], *, seed: int | None = None) -> ExperimentConfig:
    """Validate a raw dict; `seed` overrides numerics.seed."""
    raw = json.loads(json.dumps(raw))  # deep copy
    if seed is not None:
        raw.setdefault("numerics", {})
        if isinstance(raw["numerics"], dict):
            raw["numerics"]["seed"] = seed
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as err:
        e = err.errors()[0]
        ctx = e.get("ctx", {}).get("error")
        if isinstance(ctx, ConfigError):
            raise ctx from None
        field = ".".join(str(x) for x in e["loc"]) or "config"
        msg = e["msg"]
        if e["type"] == "missing":
            msg = "field required"
        raise ConfigError(field, msg) from None


def load_config(path: str | Path, *, seed: int | None = None) -> ExperimentConfig:
    return parse_config(load_raw(path), seed=seed)
