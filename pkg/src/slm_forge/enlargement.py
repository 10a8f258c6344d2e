"""Initial enlargement of the filtration: the drift kernel k, the Girsanov
pair (H, J), the stopping time tau and the density process Z.

Each supported enlarging variable has a closed-form kernel:

* ``BrownianTerminal``: L = B_T, realised by drawing B_T first and bridging.
* ``HittingTime``: L = T_a, the first time B reaches a > 0.
* ``FinitePartition``: L = 1{B_T > threshold}, with the Gaussian law of B_T.
* ``Independent``: L independent of the drivers, so k vanishes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy import special

from .coeffs import VolatilityModelSpec
from .engine import MATURED, TAU, NumericalBlowUpError, Overlay, StepState, TimeGrid

KINDS = ("BrownianTerminal", "HittingTime", "FinitePartition", "Independent")
RULES = ("J_zero", "H_zero", "split")
DEFAULT_GUARD_FRACTION = 1e-3
CONSTRAINT_RTOL = 1e-12


class KSingularityError(ValueError):
    """Kernel requested inside the guard window before its singular time."""

    def __init__(self, t: float, singular_at: float, guard: float):
        self.t, self.singular_at, self.guard = t, singular_at, guard
        super().__init__(
            f"k-singularity window: t={t:.6g} is within {guard:.3g} of the singular time {singular_at:.6g}"
        )


class HypothesisGateError(RuntimeError):
    def __init__(self, detail: str = ""):
        super().__init__("hypothesis gate failed" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class EnlargementSpec:
    kind: str
    level: float = 1.0  # a, for HittingTime
    threshold: float = 0.0  # for FinitePartition
    T: float = 1.0
    guard: float | None = None  # time buffer before the singular time; default T/1000
    hitting_cap: float | None = None  # reject paths with T_a beyond this; default 100 T

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown enlargement kind {self.kind!r}; expected one of {KINDS}")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.kind == "HittingTime" and not self.level > 0:
            raise ValueError(f"HittingTime needs level a > B_0 = 0, got {self.level}")
        if self.kind == "FinitePartition":
            p = float(special.ndtr(self.threshold / math.sqrt(self.T)))
            if not (1e-12 < p < 1 - 1e-12):
                raise ValueError(f"threshold {self.threshold} leaves a partition cell with zero probability")
        if self.guard is not None and not (0 < self.guard < self.T):
            raise ValueError("guard must lie in (0, T)")

    @property
    def delta(self) -> float:
        return self.guard if self.guard is not None else DEFAULT_GUARD_FRACTION * self.T

    @property
    def cap(self) -> float:
        return self.hitting_cap if self.hitting_cap is not None else 100.0 * self.T

    @property
    def is_trivial(self) -> bool:
        return self.kind == "Independent"

    def upper_cell_probability(self) -> float:
        return float(special.ndtr(-self.threshold / math.sqrt(self.T)))

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind, "T": self.T, "guard": self.delta}
        if self.kind == "HittingTime":
            d.update(level=self.level, hitting_cap=self.cap)
        if self.kind == "FinitePartition":
            d["threshold"] = self.threshold
        return d


def _singular_time(enl: EnlargementSpec, L):
    if enl.kind == "HittingTime":
        return L
    return enl.T


def k_values(enl: EnlargementSpec, t: float, B, L, D, *, check_guard: bool = True):
    """Vectorised kernel at time t.

    B is the current value of the driver B, L the realised enlarging
    variable (B_T, T_a, or +1/-1 for the upper/lower cell) and D the diffusion
    of S (S v for the basic model).
    """
    B = np.asarray(B, dtype=float)
    if enl.kind == "Independent":
        return np.zeros(np.broadcast(B, np.asarray(D)).shape)
    sing = np.asarray(_singular_time(enl, L), dtype=float)
    if check_guard:
        inside = t >= sing - enl.delta
        if np.any(inside):
            j = int(np.argmax(np.atleast_1d(inside)))
            raise KSingularityError(t, float(np.atleast_1d(sing)[j] if sing.ndim else sing), enl.delta)
    with np.errstate(all="ignore"):
        if enl.kind == "BrownianTerminal":
            return D * (L - B) / (enl.T - t)
        if enl.kind == "HittingTime":
            gap = enl.level - B
            return -1.0 / gap + gap / (L - t)
        rt = math.sqrt(enl.T - t)
        d = (B - enl.threshold) / rt
        log_pdf = -0.5 * d * d - 0.5 * math.log(2 * math.pi)
        up = np.exp(log_pdf - special.log_ndtr(d)) / (rt * D)
        down = -np.exp(log_pdf - special.log_ndtr(-d)) / (rt * D)
        return np.where(np.asarray(L) > 0, up, down)


def k_value(enl: EnlargementSpec, t: float, S: float, v: float, B: float, L: float, model: VolatilityModelSpec | None = None) -> float:
    """Scalar kernel at state (t, S, v, B) given the realised L."""
    D = model.s_diffusion(S, v) if model is not None else S * v
    return float(k_values(enl, t, B, L, D))


@dataclass(frozen=True)
class KProcess:
    values: np.ndarray
    floor_eps1: float
    singularity_guard: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("k values must be finite on the simulated window")


# --------------------------------------------------------------------------
# Girsanov pair


@dataclass(frozen=True)
class GirsanovAllocation:
    rule: str = "J_zero"
    theta: float = 0.5  # H share for the split rule
    cap_eps2: float = 1.0

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown allocation rule {self.rule!r}; expected one of {RULES}")
        if not self.cap_eps2 > 0:
            raise ValueError("cap_eps2 must be positive")

    def check(self, rho: float) -> None:
        needs_rho = self.rule == "H_zero" or (self.rule == "split" and self.theta != 1.0)
        if needs_rho and rho == 0:
            raise ValueError(f"allocation rule {self.rule} needs rho != 0")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"rule": self.rule, "cap_eps2": self.cap_eps2}
        if self.rule == "split":
            d["theta"] = self.theta
        return d


def allocate(k, D, rho: float, rule: GirsanovAllocation):
    """(H, J) with ``k D^2 + D H + rho J = 0``."""
    rule.check(rho)
    k = np.asarray(k, dtype=float)
    D = np.asarray(D, dtype=float)
    if rule.rule == "J_zero":
        return -k * D, np.zeros(np.broadcast(k, D).shape)
    if rule.rule == "H_zero":
        return np.zeros(np.broadcast(k, D).shape), -k * D * D / rho
    th = rule.theta
    H = -th * k * D
    J = -(1.0 - th) * k * D * D / rho if th != 1.0 else np.zeros_like(H)
    return H, J


def allocate_HJ(k: float, S: float, v: float, rho: float, rule: GirsanovAllocation, model: VolatilityModelSpec | None = None):
    D = model.s_diffusion(S, v) if model is not None else S * v
    H, J = allocate(k, D, rho, rule)
    return float(H), float(J)


def constraint_residual(k, H, J, D, rho: float):
    """Relative residual of ``k D^2 + D H + rho J = 0``."""
    k, H, J, D = (np.asarray(a, dtype=float) for a in (k, H, J, D))
    a, b, c = k * D * D, D * H, rho * J
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), np.maximum(np.abs(c), 1e-300))
    return np.abs(a + b + c) / scale


def enlargement_drift(model: VolatilityModelSpec, k, H, J, v):
    """The extra v-drift ``k mu(v)^2 + (rho H + J) mu(v)``."""
    with np.errstate(all="ignore"):
        m = model.mu(v)
        return k * m * m + (model.rho * H + J) * m


def enlarged_drift(model: VolatilityModelSpec, k, H, J, v):
    """Full drift of v in the enlarged filtration under the new measure."""
    return model.b(v) + enlargement_drift(model, k, H, J, v)


def tau_terms(model: VolatilityModelSpec, k, H, J):
    """The two quantities compared with eps1 and eps2."""
    sk, sh = model.tau_scales
    return sk * np.abs(k), sh * np.abs(model.rho * np.asarray(H) + np.asarray(J))


def gate_passed(k0, H0, J0, rho: float, eps1: float, eps2: float, scales=(1.0, 1.0)):
    """0 < eps1 < k_0 and |rho H_0 + J_0| < eps2 (scaled for the power family)."""
    sk, sh = scales
    return (eps1 > 0) & (eps1 < sk * np.asarray(k0)) & (sh * np.abs(rho * np.asarray(H0) + np.asarray(J0)) < eps2)


def compute_tau(k_path, H_path, J_path, rho: float, eps1: float, eps2: float, *, scales=(1.0, 1.0)) -> tuple[int, bool]:
    """Stop index of ``tau^k ^ tau^{H,J}`` on one path, plus the gate flag.

    When the gate fails the index is 0.
    """
    k = np.asarray(k_path.values if isinstance(k_path, KProcess) else k_path, dtype=float)
    H = np.asarray(H_path, dtype=float)
    J = np.asarray(J_path, dtype=float)
    sk, sh = scales
    if not bool(gate_passed(k[0], H[0], J[0], rho, eps1, eps2, scales)):
        return 0, False
    trig = (sk * np.abs(k) < eps1) | (sh * np.abs(rho * H + J) > eps2)
    n_steps = k.size - 1
    if trig.any():
        return int(np.argmax(trig)), True
    return n_steps, True


# --------------------------------------------------------------------------
# density process


@dataclass(frozen=True)
class DensityProcess:
    Z_path: np.ndarray
    terminal_integrability_stat: np.ndarray | float

    @property
    def Z_T(self):
        return self.Z_path[..., -1]


def simulate_density(H_path, J_path, increments, rho: float, grid: TimeGrid) -> DensityProcess:
    """Stochastic exponential of ``int H dB + int J dW``.

    `increments` is a pair (dB, dW) of arrays with the step axis last; H and J
    are sampled at the left end of each step (extra trailing entries are
    ignored). Returns Z on the grid and half the integral of
    ``H^2 + J^2 + 2 rho H J``.
    """
    dB, dW = (np.asarray(a, dtype=float) for a in increments)
    n = dB.shape[-1]

    def left_points(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(x if x.ndim == 0 else x[..., :n], dB.shape)

    H, J = left_points(H_path), left_points(J_path)
    h = grid.h
    q = H * H + J * J + 2.0 * rho * H * J
    with np.errstate(all="ignore"):
        logZ = np.cumsum(H * dB + J * dW - 0.5 * q * h, axis=-1)
        Z = np.exp(logZ)
    if not np.all(np.isfinite(Z)):
        bad = ~np.isfinite(Z)
        step = int(np.argmax(bad.reshape(-1, n).any(axis=0))) + 1
        raise NumericalBlowUpError(step, "non-finite density")
    Z = np.concatenate([np.ones(dB.shape[:-1] + (1,)), Z], axis=-1)
    stat = 0.5 * q.sum(axis=-1) * h
    return DensityProcess(Z, stat)


@dataclass(frozen=True)
class TruncationLevel:
    m: float
    bound: float
    fraction_truncated: float
    std_error: float

    def to_dict(self) -> dict[str, float]:
        return {"m": self.m, "bound": self.bound, "fraction_truncated": self.fraction_truncated, "std_error": self.std_error}


@dataclass(frozen=True)
class MeasureChangeReport:
    levels: tuple[TruncationLevel, ...]
    validated_at: float | None
    integral_quantiles: dict[str, float]
    tolerance: float

    @property
    def validated(self) -> bool:
        return self.validated_at is not None

    def to_dict(self) -> dict[str, Any]:
        return {
            "levels": [lv.to_dict() for lv in self.levels],
            "validated": self.validated,
            "validated_at": self.validated_at,
            "integral_quantiles": self.integral_quantiles,
            "tolerance": self.tolerance,
        }

    def note(self) -> str:
        if self.validated:
            return f"measure change validated at truncation level m={self.validated_at:g} (truncated fraction < {self.tolerance:g})"
        worst = self.levels[-1].fraction_truncated if self.levels else float("nan")
        return f"measure change not validated; truncated fraction {worst:.3g} at the largest level"


def validate_measure_change(
    novikov_stats, h_schedule: Mapping[float, float] | Callable[[float], float], ms: Sequence[float] | None = None, *, tolerance: float = 1e-3
) -> MeasureChangeReport:
    """Fraction of paths whose truncation time falls before the horizon, per level m.

    A path is truncated at level m when ``int (H^2 + J^2 + 2 rho H J) ds``,
    which is twice the reported statistic, reaches the bound h(m).
    """
    stats = np.asarray(novikov_stats, dtype=float).ravel()
    integral = 2.0 * stats
    if callable(h_schedule):
        if ms is None:
            ms = [1, 2, 5, 10, 20, 50, 100]
        sched = {float(m): float(h_schedule(m)) for m in ms}
    else:
        sched = {float(m): float(b) for m, b in h_schedule.items()}
    n = integral.size
    levels = []
    for m in sorted(sched):
        p = float(np.mean(integral >= sched[m])) if n else math.nan
        levels.append(TruncationLevel(m, sched[m], p, math.sqrt(max(p * (1 - p), 0.0) / max(n, 1))))
    validated_at = None
    for j, lv in enumerate(levels):
        if all(x.fraction_truncated < tolerance for x in levels[j:]):
            validated_at = lv.m
            break
    qs = {}
    if n:
        for q in (0.5, 0.9, 0.99, 0.999):
            qs[f"q{q:g}"] = float(np.quantile(integral, q))
        qs["max"] = float(integral.max())
    return MeasureChangeReport(tuple(levels), validated_at, qs, tolerance)


# --------------------------------------------------------------------------
# overlays for the path engine


class EnlargedDynamics(Overlay):
    """Adds the enlargement drift to v, tracks (k, H, J), stops at tau.

    Paths failing the start-time gate stop at index 0 with reason tau. The
    Independent kind is a control: no gate, no tau.
    """

    name = "enlargement"

    def __init__(
        self,
        model: VolatilityModelSpec,
        enl: EnlargementSpec,
        alloc: GirsanovAllocation,
        eps1: float,
        eps2: float,
        *,
        use_tau: bool = True,
        track_density: bool = False,
        add_drift: bool = True,
    ):
        if not math.isclose(enl.T, model.T):
            raise ValueError("enlargement horizon must equal the model horizon")
        alloc.check(model.rho)
        self.model, self.enl, self.alloc = model, enl, alloc
        self.eps1, self.eps2 = float(eps1), float(eps2)
        self.use_tau = use_tau and not enl.is_trivial
        self.track_density = track_density
        self.add_drift = add_drift

    # -- realisation of L ------------------------------------------------
    def begin(self, n, rng, grid, shard):
        self.grid = grid
        self.n = n
        enl = self.enl
        self.B = np.zeros(n)
        self.rejected = np.zeros(n, dtype=bool)
        self.lrng = np.random.Generator(np.random.PCG64(rng.integers(0, 2**63)))
        if enl.kind in ("BrownianTerminal", "FinitePartition"):
            self.BT = math.sqrt(enl.T) * self.lrng.standard_normal(n)
            self.L = self.BT if enl.kind == "BrownianTerminal" else np.where(self.BT > enl.threshold, 1.0, -1.0)
        elif enl.kind == "HittingTime":
            # T_a has the law of a^2 / Z^2; given T_a, a - B is a 3-d Bessel
            # bridge to 0, carried as the norm of a 3-d Brownian bridge X.
            z = self.lrng.standard_normal(n)
            with np.errstate(divide="ignore"):
                self.L = enl.level**2 / (z * z)
            self.rejected = self.L > enl.cap
            self.X = np.zeros((3, n))
            self.X[0] = enl.level
        else:
            self.L = np.zeros(n)
        self.stat = np.zeros(n)
        self.logZ = np.zeros(n)
        self.gate = np.ones(n, dtype=bool)
        self.k0 = np.zeros(n)
        self._cache_i = -1
        N = grid.n_steps
        if self.keep_paths:
            self.P = {key: np.zeros((n, N + 1)) for key in ("k", "H", "J", "B", "Z")}
            self.P["Z"][:, 0] = 1.0

    def _bessel_bridge_step(self, t0, h, dB, alive):
        """Advance X by an exact Brownian-bridge transition whose radial
        innovation is the S driver's increment, so that dB = -d|X| + drift."""
        X = self.X
        R = np.sqrt((X * X).sum(axis=0))
        e = -X / np.where(R > 0, R, 1.0)  # unit vector along which B increases
        e[:, R == 0] = np.array([[1.0], [0.0], [0.0]])
        rem = np.where(alive, self.L - t0, 1.0)
        r = np.clip((rem - h) / rem, 0.0, 1.0)
        xi = dB / math.sqrt(h)
        fresh = self.lrng.standard_normal((3, self.n))
        fresh -= e * (e * fresh).sum(axis=0)  # orthogonal part
        zeta = e * xi + fresh
        X_new = X * r + np.sqrt(h * r) * zeta
        self.X = np.where(alive, X_new, X)
        self.B = self.enl.level - np.sqrt((self.X * self.X).sum(axis=0))

    # -- per-step terms ---------------------------------------------------
    def _terms(self, st: StepState):
        if self._cache_i == st.i:
            return self._cache
        D = self.model.s_diffusion(st.S, st.v)
        sing = self.enl.T if self.enl.kind != "HittingTime" else self.L
        ok = st.t < np.asarray(sing) - self.enl.delta
        k = k_values(self.enl, st.t, self.B, self.L, D, check_guard=False)
        k = np.where(ok & st.alive, k, 0.0)
        H, J = allocate(k, D, self.model.rho, self.alloc)
        self._cache_i = st.i
        self._cache = (k, H, J, ok)
        if self.keep_paths:
            self.P["k"][:, st.i], self.P["H"][:, st.i], self.P["J"][:, st.i] = k, H, J
            self.P["B"][:, st.i] = self.B
        return self._cache

    def stop(self, st):
        k, H, J, ok = self._terms(st)
        out = []
        if st.i == 0:
            self.k0 = k.copy()
            if self.use_tau:
                sc = self.model.tau_scales
                self.gate = gate_passed(k, H, J, self.model.rho, self.eps1, self.eps2, sc) & ~self.rejected
                out.append((~self.gate, TAU))
            else:
                self.gate = ~self.rejected
                out.append((self.rejected, TAU))
        if self.use_tau:
            tk, th = tau_terms(self.model, k, H, J)
            out.append(((tk < self.eps1) | (th > self.eps2), TAU))
        out.append((~ok, MATURED))
        return out

    def v_drift(self, st):
        if not self.add_drift:
            return 0.0
        k, H, J, _ = self._terms(st)
        return np.where(st.alive, enlargement_drift(self.model, k, H, J, st.v), 0.0)

    def advance(self, st, dB, dW):
        k, H, J, _ = self._terms(st)
        h = st.h
        alive = st.alive
        q = H * H + J * J + 2.0 * self.model.rho * H * J
        self.stat = self.stat + np.where(alive, 0.5 * q * h, 0.0)
        if self.track_density or self.keep_paths:
            self.logZ = self.logZ + np.where(alive, H * dB + J * dW - 0.5 * q * h, 0.0)
        g = self.grid
        if self.enl.kind in ("BrownianTerminal", "FinitePartition"):
            t0, t1 = g.t(st.i), g.t(st.i + 1)
            rem0, rem1 = g.T - t0, g.T - t1
            step = (self.BT - self.B) * h / rem0 + math.sqrt(max(rem1, 0.0) / rem0) * dB
            self.B = np.where(alive, self.B + step, self.B)
        elif self.enl.kind == "HittingTime":
            self._bessel_bridge_step(g.t(st.i), h, dB, alive)
        else:
            self.B = np.where(alive, self.B + dB, self.B)
        if self.keep_paths:
            i = st.i + 1
            self.P["B"][:, i] = self.B
            self.P["Z"][:, i] = np.exp(self.logZ)
            # carry the last values forward for stopped paths
            for key in ("k", "H", "J"):
                self.P[key][:, i] = self.P[key][:, i - 1]

    def summary(self):
        out = {
            "gate": self.gate.copy(),
            "k0": self.k0.copy(),
            "novikov": self.stat.copy(),
            "L": np.asarray(self.L, dtype=float).copy(),
            "rejected": self.rejected.copy(),
        }
        if self.track_density:
            out["Z"] = np.exp(self.logZ)
        return out

    def path_aux(self):
        return dict(self.P) if self.keep_paths else {}

    def meta(self):
        return {
            "enlargement": self.enl.to_dict(),
            "allocation": self.alloc.to_dict(),
            "eps1": self.eps1,
            "eps2": self.eps2,
            "tau": self.use_tau,
        }


class MeasureShift(Overlay):
    """Simulate under Q with dQ/dP = E(int H dB + int J dW) for constant (H, J).

    Under Q the drivers pick up the drifts ``H + rho J`` and ``rho H + J``.
    """

    name = "measure_shift"

    def __init__(self, H: float, J: float, rho: float):
        self.H, self.J, self.rho = float(H), float(J), float(rho)

    def shift(self, st):
        return self.H + self.rho * self.J, self.rho * self.H + self.J


class DensityTracker(Overlay):
    """Track Z = E(int H dB + int J dW) for constant (H, J) along P-paths."""

    name = "density"

    def __init__(self, H: float, J: float, rho: float):
        self.H, self.J, self.rho = float(H), float(J), float(rho)

    def begin(self, n, rng, grid, shard):
        self.logZ = np.zeros(n)
        self.stat = np.zeros(n)

    def advance(self, st, dB, dW):
        H, J, h = self.H, self.J, st.h
        q = H * H + J * J + 2 * self.rho * H * J
        self.logZ = self.logZ + np.where(st.alive, H * dB + J * dW - 0.5 * q * h, 0.0)
        self.stat = self.stat + np.where(st.alive, 0.5 * q * h, 0.0)

    def summary(self):
        return {"Z": np.exp(self.logZ), "novikov": self.stat.copy()}
