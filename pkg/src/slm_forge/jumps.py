"""Price driven by a compensated compound-Poisson martingale.

``dS = S_- v^alpha dM`` with ``M = sum of jumps - intensity * E[size] * t``
(plus an optional Brownian part) and ``dv = mu(v) dW + b(v) dt``. Jump
counts per step are exact Poisson draws; the compensator and Brownian part
are applied as exact exponentials over the step with v frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .coeffs import VolatilityModelSpec
from .engine import (
    BARRIER,
    JUMP_FLOOR,
    MATURED,
    SHARD_SIZE,
    TINY,
    ExplosionBarrier,
    NumericalBlowUpError,
    PathBatch,
    TimeGrid,
    _eval_indices,
    resolve_scheme,
    Dynamics,
    run_sharded,
    shard_rng,
    v_step,
)
from .enlargement import GirsanovAllocation, constraint_residual

GUARANTEED, CONDITIONAL, VIOLATED = "guaranteed", "conditional", "violated"


class JumpFloorError(RuntimeError):
    def __init__(self, step: int, factor: float):
        self.step = step
        super().__init__(f"jump_floor: 1 + v^alpha * dM = {factor:.6g} <= 0 at step {step}")


@dataclass(frozen=True)
class JumpDriver:
    intensity: float
    sizes: tuple[float, ...] = (1.0,)
    probs: tuple[float, ...] = (1.0,)
    sigma_c: float = 0.0  # volatility of the Brownian part of M

    def __post_init__(self):
        sizes = tuple(float(s) for s in np.atleast_1d(self.sizes))
        probs = tuple(float(p) for p in np.atleast_1d(self.probs))
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "probs", probs)
        if self.intensity < 0:
            raise ValueError("intensity must be nonnegative")
        if self.sigma_c < 0:
            raise ValueError("sigma_c must be nonnegative")
        if len(sizes) == 0 or len(sizes) != len(probs):
            raise ValueError("jump law needs matching sizes and probabilities")
        if any(p < 0 for p in probs) or not math.isclose(sum(probs), 1.0, rel_tol=1e-12, abs_tol=1e-12):
            raise ValueError("jump probabilities must be nonnegative and sum to 1")

    @property
    def mean_size(self) -> float:
        return math.fsum(s * p for s, p in zip(self.sizes, self.probs))

    @property
    def second_moment(self) -> float:
        return math.fsum(s * s * p for s, p in zip(self.sizes, self.probs))

    @property
    def compensator_rate(self) -> float:
        """Drift of M per unit time: -intensity * E[size]."""
        return -self.intensity * self.mean_size

    @property
    def jump_bracket_rate(self) -> float:
        return self.intensity * self.second_moment

    @property
    def angle_bracket_rate(self) -> float:
        return self.jump_bracket_rate + self.sigma_c**2

    def to_dict(self) -> dict[str, Any]:
        return {"intensity": self.intensity, "sizes": list(self.sizes), "probs": list(self.probs), "sigma_c": self.sigma_c}


@dataclass(frozen=True)
class JumpModelSpec:
    base: VolatilityModelSpec
    alpha_exp: float = 1.0

    def __post_init__(self):
        if not self.alpha_exp > 0:
            raise ValueError("alpha_exp must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {"base": self.base.to_dict(), "alpha_exp": self.alpha_exp}


# --------------------------------------------------------------------------
# positivity


@dataclass(frozen=True)
class JumpPositivity:
    status: str
    bound: float | None = None  # v must stay below this
    witness: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"status": self.status, "v_bound": self.bound, "witness": self.witness}


def jump_positivity_check(spec: JumpModelSpec, driver: JumpDriver) -> JumpPositivity:
    """Does ``v^alpha * jump > -1`` hold for every jump size?"""
    support = [s for s, p in zip(driver.sizes, driver.probs) if p > 0]
    s_min = min(support)
    if s_min >= 0 or driver.intensity == 0:
        return JumpPositivity(GUARANTEED)
    a = spec.alpha_exp
    bound = (-1.0 / s_min) ** (1.0 / a)
    if spec.base.v0**a * s_min <= -1.0:
        return JumpPositivity(VIOLATED, bound, s_min)
    return JumpPositivity(CONDITIONAL, bound)


# --------------------------------------------------------------------------
# simulation


def _run_jump_shard(spec, driver, grid, barrier, n, rng, eval_idx, guard, scheme, keep):
    base = spec.base
    a = spec.alpha_exp
    h, N = grid.h, grid.n_steps
    dyn = Dynamics.from_spec(base)
    scheme = resolve_scheme(dyn, scheme)
    sizes = np.asarray(driver.sizes)
    probs = np.asarray(driver.probs)
    lam = driver.intensity
    comp = driver.compensator_rate
    sc = driver.sigma_c
    rho = base.rho
    ang = driver.jump_bracket_rate + 0.5 * sc * sc

    S = np.full(n, base.S0)
    v = np.full(n, base.v0)
    M = np.zeros(n)
    QV = np.zeros(n)
    expo = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    stop_index = np.full(n, N, dtype=np.int64)
    stop_code = np.full(n, MATURED, dtype=np.int8)
    levels = np.asarray(barrier.levels)
    level_hit = np.full((n, levels.size), -1, dtype=np.int64)
    S_at_level = np.full((n, levels.size), np.nan)
    S_eval = np.empty((n, eval_idx.size))
    v_eval = np.empty((n, eval_idx.size))
    M_eval = np.empty((n, eval_idx.size))
    if keep:
        P = {k: np.empty((n, N + 1)) for k in ("S", "v", "B", "W", "M")}
        for k, x in (("S", S), ("v", v), ("B", 0.0), ("W", 0.0), ("M", M)):
            P[k][:, 0] = x
        Bc = np.zeros(n)
        Wc = np.zeros(n)
    n_underflow = 0

    def mark(i):
        for j, lv in enumerate(levels):
            new = alive & (level_hit[:, j] < 0) & (v >= lv)
            level_hit[new, j] = i
            S_at_level[new, j] = S[new]
        top = alive & (v >= levels[-1])
        alive[top] = False
        stop_index[top] = i
        stop_code[top] = BARRIER

    def record(i):
        for k in np.nonzero(eval_idx == i)[0]:
            S_eval[:, k], v_eval[:, k], M_eval[:, k] = S, v, M

    mark(0)
    record(0)
    for i in range(N):
        xi = rng.standard_normal((2, n))
        dBc = math.sqrt(h) * xi[0]  # Brownian part of M
        dW = math.sqrt(h) * (rho * xi[0] + math.sqrt(max(0.0, 1 - rho * rho)) * xi[1])
        counts = rng.poisson(lam * h, n) if lam > 0 else np.zeros(n, dtype=np.int64)
        va = v**a
        jump_sum = np.zeros(n)
        jump_sq = np.zeros(n)
        factor = np.ones(n)
        floor = np.zeros(n, dtype=bool)
        if counts.any():
            rows = np.repeat(np.arange(n), counts)
            y = rng.choice(sizes, size=rows.size, p=probs)
            np.add.at(jump_sum, rows, y)
            np.add.at(jump_sq, rows, y * y)
            f = 1.0 + va[rows] * y
            bad_rows = f <= 0
            if bad_rows.any():
                floor[rows[bad_rows]] = True
            np.multiply.at(factor, rows, np.where(bad_rows, 1.0, f))
        floor &= alive
        if floor.any():
            if not guard:
                j = int(np.argmax(floor))
                raise JumpFloorError(i + 1, float(1.0 + va[j] * sizes.min()))
            alive[floor] = False
            stop_index[floor] = i + 1
            stop_code[floor] = JUMP_FLOOR
        with np.errstate(all="ignore"):
            cont = np.exp(va * comp * h + va * sc * dBc - 0.5 * va * va * sc * sc * h)
            S_new = S * factor * cont
            v_new = v_step(base.mu, base.b, v, h, dW, scheme=scheme)
        if np.any(alive & (np.isnan(S_new) | np.isnan(v_new))):
            raise NumericalBlowUpError(i + 1, "non-finite state before barrier")
        under = alive & (S_new == 0)
        if under.any():
            S_new = np.where(under, TINY, S_new)
            n_underflow += int(under.sum())
        expo = expo + np.where(alive, v ** (2 * a) * ang * h, 0.0)
        dM = jump_sum + comp * h + sc * dBc
        M = np.where(alive, M + dM, M)
        QV = np.where(alive, QV + jump_sq + sc * sc * h, QV)
        S = np.where(alive, S_new, S)
        v = np.where(alive, v_new, v)
        if keep:
            Bc = Bc + np.where(alive, dBc, 0.0)
            Wc = Wc + np.where(alive, dW, 0.0)
            for k, x in (("S", S), ("v", v), ("B", Bc), ("W", Wc), ("M", M)):
                P[k][:, i + 1] = x
        mark(i + 1)
        record(i + 1)
        if not alive.any():
            for k in np.nonzero(eval_idx > i + 1)[0]:
                S_eval[:, k], v_eval[:, k], M_eval[:, k] = S, v, M
            if keep:
                for k, x in (("S", S), ("v", v), ("B", Bc), ("W", Wc), ("M", M)):
                    P[k][:, i + 2 :] = x[:, None]
            break

    extras = {"M_eval": M_eval, "QV": QV, "moment_exponent": expo}
    meta = {
        "scheme": scheme,
        "scheme_requested": scheme,
        "s_update": "exact Poisson jump factors, exponential compensator",
        "v_update": f"{scheme} with truncation at 0",
        "h": h,
        "n_steps": N,
        "T": grid.T,
        "s_underflow_clamps": n_underflow,
        "driver": driver.to_dict(),
        "alpha_exp": a,
    }
    return PathBatch(grid.times[eval_idx], S_eval, v_eval, stop_index, stop_code, tuple(levels.tolist()),
                     level_hit, S_at_level, extras, P if keep else None, meta)


def simulate_jump_paths(
    spec: JumpModelSpec,
    driver: JumpDriver,
    grid: TimeGrid,
    barrier: ExplosionBarrier | None = None,
    *,
    n_paths: int,
    seed: int,
    t_eval=None,
    guard: bool = True,
    scheme: str = "euler",
    keep_paths: bool = False,
    threads: int = 1,
    shard_size: int = SHARD_SIZE,
    stream: int = 0,
) -> PathBatch:
    """Batch of jump-driven paths.

    With ``guard`` on, a jump that would make ``1 + v^alpha dM <= 0`` stops
    the path with reason jump_floor; with it off, the run raises
    :class:`JumpFloorError`. Without the guard the positivity check must be
    'guaranteed'.
    """
    if not guard and jump_positivity_check(spec, driver).status != GUARANTEED:
        raise ValueError("positivity not guaranteed for this jump law; enable the dynamic guard")
    barrier = barrier or ExplosionBarrier()
    eval_idx = _eval_indices(grid, t_eval)

    def one(shard, n):
        return _run_jump_shard(spec, driver, grid, barrier, n, shard_rng(seed, shard, stream), eval_idx, guard, scheme, keep_paths)

    batch = PathBatch.concat(run_sharded(one, n_paths, threads=threads, shard_size=shard_size))
    batch.meta.update(seed=int(seed), stream=int(stream), shard_size=shard_size, n_paths=n_paths, model="jump", S0=spec.base.S0)
    return batch


def simulate_jump_path(spec, driver, grid, barrier=None, seed: int = 0, *, guard: bool = True):
    batch = simulate_jump_paths(spec, driver, grid, barrier, n_paths=1, seed=seed, guard=guard, keep_paths=True)
    return batch.bundle(0, grid)


# --------------------------------------------------------------------------
# exponential moment condition


@dataclass(frozen=True)
class MomentEstimate:
    estimate: float
    std_error: float
    ci: tuple[float, float]
    finite: bool
    top_share: float
    note: str

    def to_dict(self) -> dict[str, Any]:
        f = lambda x: x if math.isfinite(x) else str(x)  # noqa: E731
        return {
            "estimate": f(self.estimate),
            "std_error": f(self.std_error),
            "ci": [f(c) for c in self.ci],
            "finite": self.finite,
            "top_share": self.top_share,
            "note": self.note,
        }


def moment_condition_estimate(
    spec: JumpModelSpec,
    driver: JumpDriver,
    grid: TimeGrid,
    n_paths: int,
    *,
    seed: int,
    confidence: float = 0.95,
    top_fraction: float = 1e-3,
    dominance: float = 0.5,
) -> MomentEstimate:
    """Monte Carlo estimate of ``E exp(int v^{2a} d<M^d> + 1/2 int v^{2a} d<M^c>)``.

    The finiteness flag is a heavy-tail diagnostic: it drops when the top
    `top_fraction` of samples carry more than `dominance` of the sum.
    """
    from scipy.stats import norm

    batch = simulate_jump_paths(spec, driver, grid, ExplosionBarrier((math.inf,)), n_paths=n_paths, seed=seed)
    e = batch.extras["moment_exponent"]
    z = float(norm.ppf(0.5 + confidence / 2))
    if np.max(e) > 700:
        return MomentEstimate(math.inf, math.inf, (math.inf, math.inf), False, 1.0, "exponent overflow; flagged infinite")
    w = np.exp(e)
    total = math.fsum(w)
    est = total / w.size
    se = float(np.std(w, ddof=1) / math.sqrt(w.size)) if w.size > 1 else 0.0
    k = max(1, int(math.ceil(top_fraction * w.size)))
    top = math.fsum(np.sort(w)[-k:]) / total if total > 0 else 0.0
    finite = top <= dominance or w.size <= k
    note = f"top {top_fraction:g} of samples carry {top:.3g} of the sum"
    if not finite:
        note += "; heavy tail, estimate not trustworthy"
    return MomentEstimate(est, se, (est - z * se, est + z * se), finite, top, note)


# --------------------------------------------------------------------------
# enlargement with jumps


def allocate_jump_HJ(k, D, lam: float, rho: float, rule: GirsanovAllocation):
    """(H, J) with ``lam k D^2 + rho J D + lam H D = 0``, D = S v^alpha."""
    rule.check(rho)
    k = np.asarray(k, dtype=float)
    D = np.asarray(D, dtype=float)
    if rule.rule == "J_zero":
        return -k * D, np.zeros(np.broadcast(k, D).shape)
    if rule.rule == "H_zero":
        return np.zeros(np.broadcast(k, D).shape), -lam * k * D / rho
    th = rule.theta
    H = -th * k * D
    J = -(1.0 - th) * lam * k * D / rho if th != 1.0 else np.zeros_like(H)
    return H, J


def jump_constraint_residual(k, H, J, D, lam: float, rho: float):
    terms = (lam * np.asarray(k) * np.asarray(D) ** 2, rho * np.asarray(J) * np.asarray(D), lam * np.asarray(H) * np.asarray(D))
    scale = np.maximum(np.maximum(np.abs(terms[0]), np.abs(terms[1])), np.maximum(np.abs(terms[2]), 1e-300))
    return np.abs(terms[0] + terms[1] + terms[2]) / scale


@dataclass(frozen=True)
class JumpDrift:
    s_drift: float
    v_drift: float
    residual: float
    H: float
    J: float

    def to_dict(self) -> dict[str, float]:
        return {"s_drift": self.s_drift, "v_drift": self.v_drift, "residual": self.residual, "H": self.H, "J": self.J}


def enlarged_jump_drift(
    spec: JumpModelSpec,
    k: float,
    S: float,
    v: float,
    driver: JumpDriver,
    rho: float | None = None,
    *,
    H: float | None = None,
    J: float | None = None,
    rule: GirsanovAllocation | None = None,
    rtol: float = 1e-12,
) -> JumpDrift:
    """S-side drift (zero when the constraint holds) and the extra v drift
    ``H rho mu + J mu + k mu^2``.

    Give either (H, J) or an allocation rule.
    """
    rho = spec.base.rho if rho is None else rho
    lam = driver.angle_bracket_rate
    D = S * v**spec.alpha_exp
    if H is None or J is None:
        H, J = (float(x) for x in allocate_jump_HJ(k, D, lam, rho, rule or GirsanovAllocation()))
    s_drift = lam * k * D * D + rho * J * D + lam * H * D
    res = float(jump_constraint_residual(k, H, J, D, lam, rho))
    if res > rtol:
        raise ValueError(f"jump constraint residual {res:.3g} exceeds {rtol:g}")
    m = float(spec.base.mu(v))
    return JumpDrift(float(s_drift), H * rho * m + J * m + k * m * m, res, float(H), float(J))
