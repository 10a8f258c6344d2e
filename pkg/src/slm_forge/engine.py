"""Path simulation for the coupled (S, v) system and for scalar oracle SDEs.

S is advanced multiplicatively in log space, so it stays positive by
construction. v takes Euler or Milstein steps and is truncated at 0. Paths
are simulated in fixed-size shards, each with its own spawned random stream,
so results do not depend on how many threads run the shards.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .coeffs import CoefficientFunction, VolatilityModelSpec

SHARD_SIZE = 1 << 15
TINY = float(np.finfo(float).tiny)
DEFAULT_LEVELS = (1e2, 1e3, 1e4, 1e6)

MATURED, BARRIER, TAU, JUMP_FLOOR = 0, 1, 2, 3
STOP_NAMES = {MATURED: "matured", BARRIER: "barrier", TAU: "tau", JUMP_FLOOR: "jump_floor"}


class NumericalBlowUpError(RuntimeError):
    def __init__(self, step: int, what: str):
        self.step = step
        super().__init__(f"numerical blow-up at step {step}: {what}")


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")

    @classmethod
    def from_step(cls, T: float, h: float) -> "TimeGrid":
        n = round(T / h)
        if n < 1 or not math.isclose(n * h, T, rel_tol=1e-12):
            raise ValueError(f"step {h} does not divide horizon {T}")
        return cls(T, int(n))

    @property
    def h(self) -> float:
        return self.T / self.n_steps

    def t(self, i: int) -> float:
        return self.T * i / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.T * np.arange(self.n_steps + 1) / self.n_steps

    def index_of(self, t: float) -> int:
        """Grid index of time t, rounded up to the next grid point."""
        if t < 0 or t > self.T * (1 + 1e-12):
            raise ValueError(f"time {t} outside [0, {self.T}]")
        return min(self.n_steps, int(math.ceil(t / self.h - 1e-9)))

    def halved(self) -> "TimeGrid":
        return TimeGrid(self.T, 2 * self.n_steps)


@dataclass(frozen=True)
class ExplosionBarrier:
    levels: tuple[float, ...] = DEFAULT_LEVELS

    def __post_init__(self):
        lv = tuple(float(x) for x in self.levels)
        if not lv:
            raise ValueError("at least one barrier level is required")
        if any(x <= 0 for x in lv) or any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError("barrier levels must be positive and strictly increasing")
        object.__setattr__(self, "levels", lv)

    @property
    def top(self) -> float:
        return self.levels[-1]


@dataclass(frozen=True)
class DriverIncrements:
    dB: np.ndarray
    dW: np.ndarray

    @classmethod
    def draw(cls, xi1, xi2, rho: float, h: float) -> "DriverIncrements":
        sq = math.sqrt(h)
        return cls(sq * xi1, sq * (rho * xi1 + math.sqrt(max(0.0, 1.0 - rho * rho)) * xi2))


@dataclass
class StepState:
    """Mutable per-step view handed to overlays (arrays over the shard)."""

    i: int
    t: float
    h: float
    S: np.ndarray
    v: np.ndarray
    alive: np.ndarray


class Overlay:
    """Hook into the step loop. Subclasses override what they need."""

    name = "overlay"
    keep_paths = False

    def spawn(self) -> "Overlay":
        return copy.deepcopy(self)

    def begin(self, n: int, rng: np.random.Generator, grid: TimeGrid, shard: int) -> None:
        pass

    def stop(self, st: StepState) -> list[tuple[np.ndarray, int]]:
        return []

    def v_drift(self, st: StepState):
        return 0.0

    def shift(self, st: StepState):
        """Per-unit-time drifts (for B, for W) added to the increments."""
        return None

    def advance(self, st: StepState, dB: np.ndarray, dW: np.ndarray) -> None:
        pass

    def summary(self) -> dict[str, np.ndarray]:
        """Per-path arrays merged into the batch extras."""
        return {}

    def path_aux(self) -> dict[str, np.ndarray]:
        """(n, n_steps + 1) arrays, only requested when paths are kept."""
        return {}

    def meta(self) -> dict[str, Any]:
        return {}


@dataclass(frozen=True)
class Dynamics:
    """What the step loop needs from a model."""

    S0: float
    rho: float
    s_vol: Callable
    v0: float | None = None
    mu: CoefficientFunction | None = None
    b: CoefficientFunction | None = None
    barrier_on: str = "v"
    label: str = ""

    @classmethod
    def from_spec(cls, spec: VolatilityModelSpec) -> "Dynamics":
        return cls(spec.S0, spec.rho, spec.s_vol, spec.v0, spec.mu, spec.b, "v", spec.family)

    @classmethod
    def scalar(cls, sigma: Callable, S0: float) -> "Dynamics":
        return cls(S0, 0.0, lambda S, v: sigma(S), None, None, None, "S", "scalar")


def v_step(
    mu: CoefficientFunction,
    b: CoefficientFunction,
    v: np.ndarray,
    h: float,
    dW: np.ndarray,
    *,
    extra_drift=0.0,
    noise_shift=0.0,
    scheme: str = "euler",
    noise: float = 1.0,
) -> np.ndarray:
    """One step of dv = mu(v) dW + (b(v) + extra) dt, truncated at 0.

    `noise_shift` is a per-unit-time drift added to dW (measure change); the
    Milstein correction uses the raw increment.
    """
    with np.errstate(all="ignore"):
        m = noise * mu(v)
        out = v + (b(v) + extra_drift) * h + m * (dW + noise_shift * h)
        if scheme == "milstein":
            out = out + 0.5 * m * noise * mu.derivative(v) * (dW * dW - h)
    return np.maximum(out, 0.0)


@dataclass
class PathBatch:
    """Per-path outcomes of a simulation run (rows are paths)."""

    t_eval: np.ndarray
    S_eval: np.ndarray
    v_eval: np.ndarray
    stop_index: np.ndarray
    stop_code: np.ndarray
    levels: tuple[float, ...]
    level_hit: np.ndarray
    S_at_level: np.ndarray
    extras: dict[str, np.ndarray] = field(default_factory=dict)
    paths: dict[str, np.ndarray] | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return int(self.stop_index.shape[0])

    @property
    def gate(self) -> np.ndarray:
        return self.extras.get("gate", np.ones(self.n_paths, dtype=bool))

    def eval_column(self, t: float) -> int:
        j = np.nonzero(np.isclose(self.t_eval, t, rtol=0, atol=1e-12))[0]
        if j.size == 0:
            raise KeyError(f"time {t} was not recorded; recorded {self.t_eval.tolist()}")
        return int(j[0])

    def level_column(self, level: float) -> int:
        for j, lv in enumerate(self.levels):
            if math.isclose(lv, level, rel_tol=1e-12):
                return j
        raise KeyError(f"barrier level {level} not tracked; tracked {self.levels}")

    @staticmethod
    def concat(parts: Sequence["PathBatch"]) -> "PathBatch":
        first = parts[0]
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
        extras = {k: np.concatenate([p.extras[k] for p in parts]) for k in first.extras}
        paths = None
        if first.paths is not None:
            paths = {k: np.concatenate([p.paths[k] for p in parts]) for k in first.paths}
        meta = dict(first.meta)
        meta["n_shards"] = len(parts)
        if "s_underflow_clamps" in meta:
            meta["s_underflow_clamps"] = sum(p.meta["s_underflow_clamps"] for p in parts)
        return PathBatch(
            first.t_eval, cat("S_eval"), cat("v_eval"), cat("stop_index"), cat("stop_code"),
            first.levels, cat("level_hit"), cat("S_at_level"), extras, paths, meta,
        )

    def bundle(self, j: int = 0, grid: TimeGrid | None = None) -> "StoppedPathBundle":
        if self.paths is None:
            raise ValueError("paths were not kept; rerun with keep_paths=True")
        stop = int(self.stop_index[j])
        n_steps = self.paths["S"].shape[1] - 1
        times = (grid.times if grid is not None else np.linspace(0.0, self.meta["T"], n_steps + 1))[: stop + 1]
        code = int(self.stop_code[j])
        reason = STOP_NAMES[code]
        if code == BARRIER:
            reason = f"barrier({self.levels[-1]:g})"
        aux = {k: v[j, : stop + 1].copy() for k, v in self.paths.items() if k not in ("S", "v", "B")}
        return StoppedPathBundle(
            times=times,
            S_path=self.paths["S"][j, : stop + 1].copy(),
            v_path=self.paths["v"][j, : stop + 1].copy(),
            B_path=self.paths["B"][j, : stop + 1].copy(),
            stop_reason=reason,
            stop_index=stop,
            aux=aux,
            meta=dict(self.meta),
        )


@dataclass
class StoppedPathBundle:
    times: np.ndarray
    S_path: np.ndarray
    v_path: np.ndarray
    B_path: np.ndarray
    stop_reason: str
    stop_index: int
    aux: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if np.any(self.S_path <= 0):
            raise NumericalBlowUpError(int(np.argmax(self.S_path <= 0)), "nonpositive S before stop")

    def csv_rows(self) -> list[dict[str, float]]:
        """Rows with columns t, S, v, B, W, k, Z (missing columns left empty)."""
        rows = []
        for i, t in enumerate(self.times):
            row = {"t": float(t), "S": float(self.S_path[i]), "v": float(self.v_path[i]), "B": float(self.B_path[i])}
            for k in ("W", "k", "Z"):
                row[k] = float(self.aux[k][i]) if k in self.aux else ""
            rows.append(row)
        return rows


@dataclass(frozen=True)
class SimOptions:
    scheme: str = "euler"
    numeraire: bool = False  # simulate under the measure with S as numeraire
    zero_noise: bool = False
    antithetic: bool = False
    keep_paths: bool = False

    def __post_init__(self):
        if self.scheme not in ("euler", "milstein"):
            raise ValueError(f"unknown scheme {self.scheme!r}")


def resolve_scheme(dyn: Dynamics, scheme: str) -> str:
    """Milstein needs a registered derivative of mu; otherwise fall back to Euler."""
    if scheme == "milstein" and (dyn.mu is None or not dyn.mu.has_derivative):
        return "euler"
    return scheme


def _draw(rng: np.random.Generator, n: int, antithetic: bool) -> np.ndarray:
    if not antithetic:
        return rng.standard_normal((2, n))
    half = rng.standard_normal((2, (n + 1) // 2))
    return np.concatenate([half, -half], axis=1)[:, :n]


def _run_shard(
    dyn: Dynamics,
    grid: TimeGrid,
    barrier: ExplosionBarrier,
    n: int,
    rng: np.random.Generator,
    opts: SimOptions,
    overlays: Sequence[Overlay],
    eval_idx: np.ndarray,
    shard: int,
) -> PathBatch:
    h, N = grid.h, grid.n_steps
    scheme = resolve_scheme(dyn, opts.scheme)
    noise = 0.0 if opts.zero_noise else 1.0
    has_v = dyn.v0 is not None
    rho = dyn.rho

    S = np.full(n, float(dyn.S0))
    v = np.full(n, float(dyn.v0) if has_v else 0.0)
    alive = np.ones(n, dtype=bool)
    stop_index = np.full(n, N, dtype=np.int64)
    stop_code = np.full(n, MATURED, dtype=np.int8)
    levels = np.asarray(barrier.levels)
    level_hit = np.full((n, levels.size), -1, dtype=np.int64)
    S_at_level = np.full((n, levels.size), np.nan)
    S_eval = np.empty((n, eval_idx.size))
    v_eval = np.empty((n, eval_idx.size))

    keep = opts.keep_paths
    if keep:
        P_S = np.empty((n, N + 1))
        P_v = np.empty((n, N + 1))
        P_B = np.empty((n, N + 1))
        P_W = np.empty((n, N + 1))
        P_S[:, 0], P_v[:, 0], P_B[:, 0], P_W[:, 0] = S, v, 0.0, 0.0
        Bc = np.zeros(n)
        Wc = np.zeros(n)

    for ov in overlays:
        ov.keep_paths = keep
        ov.begin(n, rng, grid, shard)

    def watched():
        return v if dyn.barrier_on == "v" else S

    def mark_levels(i):
        x = watched()
        for j, lv in enumerate(levels):
            new = alive & (level_hit[:, j] < 0) & (x >= lv)
            if new.any():
                level_hit[new, j] = i
                S_at_level[new, j] = S[new]
        top = alive & (x >= levels[-1])
        if top.any():
            alive[top] = False
            stop_index[top] = i
            stop_code[top] = BARRIER

    def record(i):
        hits = np.nonzero(eval_idx == i)[0]
        for k in hits:
            S_eval[:, k] = S
            v_eval[:, k] = v

    n_underflow = 0
    mark_levels(0)
    record(0)
    st = StepState(0, 0.0, h, S, v, alive)
    for i in range(N):
        st.i, st.t, st.S, st.v, st.alive = i, grid.t(i), S, v, alive
        for ov in overlays:
            for mask, code in ov.stop(st):
                hit = alive & mask
                if hit.any():
                    alive[hit] = False
                    stop_index[hit] = i
                    stop_code[hit] = code
        if not alive.any():
            for k in np.nonzero(eval_idx > i)[0]:
                S_eval[:, k] = S
                v_eval[:, k] = v
            if keep:
                P_S[:, i + 1 :] = S[:, None]
                P_v[:, i + 1 :] = v[:, None]
                P_B[:, i + 1 :] = Bc[:, None]
                P_W[:, i + 1 :] = Wc[:, None]
            break

        xi = _draw(rng, n, opts.antithetic)
        inc = DriverIncrements.draw(xi[0], xi[1], rho, h)
        dB, dW = inc.dB, inc.dW

        with np.errstate(all="ignore"):
            sig = noise * np.asarray(dyn.s_vol(S, v), dtype=float)
            sB = 0.0
            sW = 0.0
            if opts.numeraire:
                sB = sB + sig
                sW = sW + rho * sig
            extra = 0.0
            for ov in overlays:
                s = ov.shift(st)
                if s is not None:
                    sB = sB + s[0]
                    sW = sW + s[1]
                extra = extra + ov.v_drift(st)
            S_new = S * np.exp(sig * (dB + sB * h) - 0.5 * sig * sig * h)
            if has_v:
                v_new = v_step(dyn.mu, dyn.b, v, h, dW, extra_drift=extra, noise_shift=sW, scheme=scheme, noise=noise)
            else:
                v_new = v

        bad = alive & (np.isnan(S_new) | (has_v & np.isnan(v_new)))
        if bad.any():
            raise NumericalBlowUpError(i + 1, "non-finite state before barrier")
        if has_v and np.any(alive & np.isinf(S_new) & (v_new < levels[-1])):
            raise NumericalBlowUpError(i + 1, "S overflow below the v barrier")
        if np.any(alive & (S_new < 0)):
            raise NumericalBlowUpError(i + 1, "S lost positivity")
        under = alive & (S_new == 0)
        if under.any():
            # exp underflow of an exact positive value; hold it at the smallest normal double
            S_new = np.where(under, TINY, S_new)
            n_underflow += int(under.sum())

        S = np.where(alive, S_new, S)
        if has_v:
            v = np.where(alive, v_new, v)
        st.S, st.v = S, v
        for ov in overlays:
            ov.advance(st, dB, dW)
        if keep:
            Bc = Bc + np.where(alive, dB, 0.0)
            Wc = Wc + np.where(alive, dW, 0.0)
            P_S[:, i + 1], P_v[:, i + 1], P_B[:, i + 1], P_W[:, i + 1] = S, v, Bc, Wc
        mark_levels(i + 1)
        record(i + 1)

    extras: dict[str, np.ndarray] = {}
    meta: dict[str, Any] = {
        "scheme": scheme,
        "scheme_requested": opts.scheme,
        "s_update": "log-space exponential Euler",
        "v_update": f"{scheme} with truncation at 0",
        "h": h,
        "n_steps": N,
        "T": grid.T,
        "numeraire": opts.numeraire,
        "zero_noise": opts.zero_noise,
        "antithetic": opts.antithetic,
        "stopping_times": "rounded up to the next grid point",
        "s_underflow_clamps": n_underflow,
    }
    for ov in overlays:
        extras.update(ov.summary())
        meta.update(ov.meta())
    paths = None
    if keep:
        paths = {"S": P_S, "v": P_v, "B": P_B, "W": P_W}
        for ov in overlays:
            paths.update(ov.path_aux())
    return PathBatch(
        grid.times[eval_idx], S_eval, v_eval, stop_index, stop_code, tuple(levels.tolist()),
        level_hit, S_at_level, extras, paths, meta,
    )


def shard_rng(seed: int, shard: int, stream: int = 0) -> np.random.Generator:
    """Independent stream for a (seed, shard, stream) triple."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(shard)))))


def shard_sizes(n_paths: int, shard_size: int = SHARD_SIZE) -> list[int]:
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    full, rest = divmod(n_paths, shard_size)
    return [shard_size] * full + ([rest] if rest else [])


def run_sharded(fn: Callable[[int, int], Any], n_paths: int, *, threads: int = 1, shard_size: int = SHARD_SIZE) -> list:
    """Call fn(shard, n) for every shard; results come back in shard order."""
    sizes = shard_sizes(n_paths, shard_size)
    if threads <= 1 or len(sizes) == 1:
        return [fn(k, m) for k, m in enumerate(sizes)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda km: fn(*km), enumerate(sizes)))


def _eval_indices(grid: TimeGrid, t_eval) -> np.ndarray:
    if t_eval is None:
        t_eval = (grid.T,)
    ts = np.atleast_1d(np.asarray(t_eval, dtype=float))
    return np.array([grid.index_of(t) for t in ts], dtype=np.int64)


def simulate_dynamics(
    dyn: Dynamics,
    grid: TimeGrid,
    barrier: ExplosionBarrier | None = None,
    *,
    n_paths: int = 1,
    seed: int,
    options: SimOptions = SimOptions(),
    overlays: Sequence[Overlay] = (),
    t_eval=None,
    threads: int = 1,
    shard_size: int = SHARD_SIZE,
    stream: int = 0,
) -> PathBatch:
    barrier = barrier or ExplosionBarrier()
    eval_idx = _eval_indices(grid, t_eval)

    def one(shard: int, n: int) -> PathBatch:
        ovs = [ov.spawn() for ov in overlays]
        return _run_shard(dyn, grid, barrier, n, shard_rng(seed, shard, stream), options, ovs, eval_idx, shard)

    batch = PathBatch.concat(run_sharded(one, n_paths, threads=threads, shard_size=shard_size))
    batch.meta.update(seed=int(seed), stream=int(stream), shard_size=shard_size, n_paths=n_paths, model=dyn.label, S0=dyn.S0)
    return batch


def simulate_paths(
    spec: VolatilityModelSpec,
    grid: TimeGrid,
    barrier: ExplosionBarrier | None = None,
    *,
    n_paths: int,
    seed: int,
    scheme: str = "euler",
    overlays: Sequence[Overlay] = (),
    t_eval=None,
    numeraire: bool = False,
    zero_noise: bool = False,
    antithetic: bool = False,
    keep_paths: bool = False,
    threads: int = 1,
    shard_size: int = SHARD_SIZE,
    stream: int = 0,
) -> PathBatch:
    """Monte Carlo batch of the coupled (S, v) system."""
    opts = SimOptions(scheme, numeraire, zero_noise, antithetic, keep_paths)
    return simulate_dynamics(
        Dynamics.from_spec(spec), grid, barrier, n_paths=n_paths, seed=seed, options=opts,
        overlays=overlays, t_eval=t_eval, threads=threads, shard_size=shard_size, stream=stream,
    )


class _CallbackDrift(Overlay):
    name = "drift_callback"

    def __init__(self, fn):
        self.fn = fn

    def spawn(self):
        return self

    def v_drift(self, st):
        return self.fn(st.t, st.S, st.v, st.i)


def simulate_path(
    spec: VolatilityModelSpec,
    drift_overlay=None,
    grid: TimeGrid | None = None,
    barrier: ExplosionBarrier | None = None,
    seed: int = 0,
    scheme: str = "euler",
    *,
    zero_noise: bool = False,
) -> StoppedPathBundle:
    """One path of the coupled system.

    `drift_overlay` is either an :class:`Overlay` or a callable
    ``(t, S, v, step) -> extra v drift``.
    """
    grid = grid or TimeGrid(spec.T, 256)
    ovs: list[Overlay] = []
    if drift_overlay is not None:
        ovs.append(drift_overlay if isinstance(drift_overlay, Overlay) else _CallbackDrift(drift_overlay))
    batch = simulate_paths(
        spec, grid, barrier, n_paths=1, seed=seed, scheme=scheme, overlays=ovs,
        zero_noise=zero_noise, keep_paths=True,
    )
    return batch.bundle(0, grid)


def simulate_scalar_sde(
    sigma: Callable,
    S0: float,
    grid: TimeGrid,
    barrier: ExplosionBarrier | None = None,
    seed: int = 0,
    *,
    n_paths: int = 1,
    t_eval=None,
    numeraire: bool = False,
    zero_noise: bool = False,
    antithetic: bool = False,
    keep_paths: bool | None = None,
    threads: int = 1,
    shard_size: int = SHARD_SIZE,
    stream: int = 0,
):
    """``dX = X sigma(X) dB`` with barrier levels on X.

    Returns a :class:`StoppedPathBundle` for a single path and a
    :class:`PathBatch` otherwise. With ``numeraire=True`` the driver gets the
    drift ``sigma(X)``, i.e. the dynamics under the measure that uses X as
    numeraire.
    """
    if not S0 > 0:
        raise ValueError("S0 must be positive")
    single = n_paths == 1 and keep_paths is None
    keep = bool(keep_paths) or single
    opts = SimOptions("euler", numeraire, zero_noise, antithetic, keep)
    batch = simulate_dynamics(
        Dynamics.scalar(sigma, S0), grid, barrier, n_paths=n_paths, seed=seed, options=opts,
        t_eval=t_eval, threads=threads, shard_size=shard_size, stream=stream,
    )
    return batch.bundle(0, grid) if single else batch


# --------------------------------------------------------------------------
# strong convergence on GBM volatility


@dataclass(frozen=True)
class ConvergenceResult:
    hs: tuple[float, ...]
    errors: tuple[float, ...]
    slope: float
    scheme: str

    def to_dict(self) -> dict[str, Any]:
        return {"h": list(self.hs), "strong_error": list(self.errors), "slope": self.slope, "scheme": self.scheme}


def _gbm_params(spec: VolatilityModelSpec) -> tuple[float, float]:
    def linear_coef(f: CoefficientFunction) -> float:
        if not f.terms:
            return 0.0
        if len(f.terms) == 1 and f.terms[0].kind == "power" and f.terms[0].param == 1.0:
            return f.terms[0].coef
        raise ValueError(f"convergence probe needs GBM volatility (linear mu and b), got {f.name}")

    return linear_coef(spec.mu), linear_coef(spec.b)


def convergence_probe(
    spec: VolatilityModelSpec,
    hs: Sequence[float] = tuple(2.0**-k for k in range(4, 11)),
    n_paths: int = 20000,
    *,
    seed: int = 0,
    scheme: str = "euler",
) -> ConvergenceResult:
    """Strong error of the v scheme against the exact GBM solution.

    All step sizes share the same Brownian path, summed from the finest
    increments. Truncation at 0 is applied exactly as in the engine.
    """
    sigma, r = _gbm_params(spec)
    hs = tuple(sorted(hs, reverse=True))
    T = spec.T
    grids = [TimeGrid.from_step(T, h) for h in hs]
    n_fine = grids[-1].n_steps
    for g in grids:
        if n_fine % g.n_steps:
            raise ValueError("step sizes must be nested")
    rng = shard_rng(seed, 0)
    h_f = T / n_fine
    dW_f = math.sqrt(h_f) * rng.standard_normal((n_paths, n_fine))
    W_T = dW_f.sum(axis=1)
    exact = spec.v0 * np.exp((r - 0.5 * sigma**2) * T + sigma * W_T)
    resolved = "milstein" if scheme == "milstein" and spec.mu.has_derivative else "euler"
    errors = []
    for g in grids:
        m = n_fine // g.n_steps
        dW = dW_f.reshape(n_paths, g.n_steps, m).sum(axis=2)
        v = np.full(n_paths, spec.v0)
        for i in range(g.n_steps):
            v = v_step(spec.mu, spec.b, v, g.h, dW[:, i], scheme=resolved)
        errors.append(float(np.mean(np.abs(v - exact))))
    errs = np.asarray(errors)
    if np.all(errs == 0):
        slope = math.nan
    else:
        slope = float(np.polyfit(np.log(hs), np.log(np.maximum(errs, 1e-300)), 1)[0])
    return ConvergenceResult(hs, tuple(errors), slope, resolved)


def config_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()
