"""Monte Carlo estimators: martingale defect, explosion probabilities under
the S-numeraire measure, and coupling / decomposition / Girsanov harnesses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy import stats as sps

from .coeffs import CoefficientFunction, VolatilityModelSpec
from .engine import (
    BARRIER,
    SHARD_SIZE,
    ExplosionBarrier,
    PathBatch,
    TimeGrid,
    shard_rng,
    simulate_paths,
    simulate_scalar_sde,
    v_step,
)
from .enlargement import (
    DensityTracker,
    EnlargedDynamics,
    EnlargementSpec,
    GirsanovAllocation,
    HypothesisGateError,
    MeasureShift,
    validate_measure_change,
)

MARTINGALE, DETECTED, INCONCLUSIVE = "martingale-consistent", "strict-LM-detected", "inconclusive"


def z_value(confidence: float) -> float:
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    return float(sps.norm.ppf(0.5 + confidence / 2.0))


class MeanAccumulator:
    """Count, sum and sum of squares with compensated (Neumaier) merging.

    Each added chunk is summed exactly with :func:`math.fsum`, so results
    from shards merged in any grouping agree to rounding.
    """

    __slots__ = ("n", "_s", "_cs", "_q", "_cq")

    def __init__(self):
        self.n = 0
        self._s = self._cs = self._q = self._cq = 0.0

    @staticmethod
    def _neumaier(total, comp, x):
        t = total + x
        if abs(total) >= abs(x):
            comp += (total - t) + x
        else:
            comp += (x - t) + total
        return t, comp

    def add(self, values) -> "MeanAccumulator":
        x = np.asarray(values, dtype=float).ravel()
        if x.size:
            self.n += x.size
            self._s, self._cs = self._neumaier(self._s, self._cs, math.fsum(x))
            self._q, self._cq = self._neumaier(self._q, self._cq, math.fsum(x * x))
        return self

    def merge(self, other: "MeanAccumulator") -> "MeanAccumulator":
        out = MeanAccumulator()
        out.n = self.n + other.n
        out._s, out._cs = self._neumaier(self._s, self._cs + other._cs, other._s)
        out._q, out._cq = self._neumaier(self._q, self._cq + other._cq, other._q)
        return out

    @classmethod
    def from_shards(cls, values, shard_size: int = SHARD_SIZE) -> "MeanAccumulator":
        x = np.asarray(values, dtype=float).ravel()
        acc = cls()
        for lo in range(0, x.size, shard_size):
            acc = acc.merge(cls().add(x[lo : lo + shard_size]))
        return acc

    @property
    def total(self) -> float:
        return self._s + self._cs

    @property
    def mean(self) -> float:
        return self.total / self.n if self.n else math.nan

    @property
    def variance(self) -> float:
        if self.n < 2:
            return math.nan
        m = self.mean
        return max((self._q + self._cq) - self.n * m * m, 0.0) / (self.n - 1)

    @property
    def std_error(self) -> float:
        return math.sqrt(self.variance / self.n) if self.n >= 2 else math.nan


# --------------------------------------------------------------------------
# defect


@dataclass(frozen=True)
class DefectReport:
    t_eval: float
    estimate_E: float
    defect: float
    std_error: float
    n_paths: int
    verdict: str
    bias_notes: str
    z: float = 1.96
    h: float = math.nan
    S0: float = 1.0
    gate_fraction: float = 1.0
    exploded_fraction: float = 0.0

    @property
    def ci(self) -> tuple[float, float]:
        return self.estimate_E - self.z * self.std_error, self.estimate_E + self.z * self.std_error

    def to_dict(self) -> dict[str, Any]:
        return {
            "t_eval": self.t_eval,
            "estimate_E": self.estimate_E,
            "defect": self.defect,
            "std_error": self.std_error,
            "n_paths": self.n_paths,
            "verdict": self.verdict,
            "bias_notes": self.bias_notes,
            "z": self.z,
            "h": self.h,
            "gate_fraction": self.gate_fraction,
            "exploded_fraction": self.exploded_fraction,
        }


def defect_verdict(defect: float, se: float, z: float) -> str:
    if defect > z * se:
        return DETECTED
    if defect >= -z * se:
        return MARTINGALE
    return INCONCLUSIVE


@dataclass(frozen=True)
class DefectStudy:
    """Headline defect at step h and h/2; a verdict needs both to agree."""

    coarse: DefectReport
    fine: DefectReport | None
    verdict: str
    note: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "verdict": self.verdict,
            "note": self.note,
            "h": self.coarse.to_dict(),
            "h_half": self.fine.to_dict() if self.fine else None,
        }


def combine_studies(coarse: DefectReport, fine: DefectReport | None) -> DefectStudy:
    if fine is None:
        return DefectStudy(coarse, None, coarse.verdict, "single step size; no refinement check")
    lo1, hi1 = coarse.ci
    lo2, hi2 = fine.ci
    overlap = lo1 <= hi2 and lo2 <= hi1
    if coarse.verdict == DETECTED and fine.verdict == DETECTED and overlap:
        return DefectStudy(coarse, fine, DETECTED, "defect detected at h and h/2 with overlapping intervals")
    if coarse.verdict == MARTINGALE and fine.verdict == MARTINGALE:
        return DefectStudy(coarse, fine, MARTINGALE, "no significant defect at h or h/2")
    why = "step sizes disagree" if coarse.verdict != fine.verdict else "intervals at h and h/2 do not overlap"
    if coarse.verdict == fine.verdict == INCONCLUSIVE:
        why = "significantly negative defect"
    return DefectStudy(coarse, fine, INCONCLUSIVE, why)


def report_from_batch(
    batch: PathBatch, t: float, S0: float, *, z: float = 1.96, notes: str = "", use_gate: bool = True
) -> DefectReport:
    """Defect at time t from a batch.

    Paths that crossed the top barrier by t count as exploded and contribute
    0; paths failing the start-time gate are left out.
    """
    col = batch.eval_column(t)
    idx = int(round(t / batch.meta["h"]))
    keep = batch.gate if use_gate else np.ones(batch.n_paths, dtype=bool)
    exploded = (batch.stop_code == BARRIER) & (batch.stop_index <= idx)
    y = np.where(exploded, 0.0, batch.S_eval[:, col])[keep]
    n = int(keep.sum())
    if n == 0:
        raise HypothesisGateError("every path was stopped at tau = 0")
    acc = MeanAccumulator.from_shards(y, batch.meta.get("shard_size", SHARD_SIZE))
    E, se = acc.mean, acc.std_error
    d = S0 - E
    parts = [
        f"h={batch.meta['h']:.6g} ({batch.meta.get('scheme', 'euler')})",
        "stopping times rounded up to the grid",
    ]
    if exploded[keep].any():
        parts.append(f"{int(exploded[keep].sum())} paths crossed the top barrier {batch.levels[-1]:g} and count as exploded")
    if notes:
        parts.append(notes)
    return DefectReport(
        t_eval=float(t), estimate_E=E, defect=d, std_error=se, n_paths=n, verdict=defect_verdict(d, se, z),
        bias_notes="; ".join(parts), z=z, h=float(batch.meta["h"]), S0=S0,
        gate_fraction=float(keep.mean()), exploded_fraction=float(exploded[keep].mean()) if n else 0.0,
    )


def _enlarged_overlays(model, enlargement, allocation, eps1, eps2, *, use_tau=True):
    if enlargement is None:
        return []
    return [EnlargedDynamics(model, enlargement, allocation, eps1, eps2, use_tau=use_tau)]


def simulate_enlarged(
    model: VolatilityModelSpec,
    enlargement: EnlargementSpec | None,
    grid: TimeGrid,
    barrier: ExplosionBarrier | None = None,
    *,
    n_paths: int,
    seed: int,
    t_eval=None,
    allocation: GirsanovAllocation | None = None,
    eps1: float = 0.05,
    eps2: float = 1.0,
    scheme: str = "euler",
    numeraire: bool = False,
    zero_noise: bool = False,
    antithetic: bool = False,
    keep_paths: bool = False,
    threads: int = 1,
    stream: int = 0,
) -> PathBatch:
    """(S, v) under the enlarged filtration: driftless S, v with the enlargement drift, stopped at tau."""
    allocation = allocation or GirsanovAllocation(cap_eps2=eps2)
    ovs = _enlarged_overlays(model, enlargement, allocation, eps1, eps2)
    return simulate_paths(
        model, grid, barrier, n_paths=n_paths, seed=seed, scheme=scheme, overlays=ovs, t_eval=t_eval,
        numeraire=numeraire, zero_noise=zero_noise, antithetic=antithetic, keep_paths=keep_paths,
        threads=threads, stream=stream,
    )


def estimate_defect(
    model: VolatilityModelSpec,
    enlargement: EnlargementSpec | None = None,
    grid: TimeGrid | None = None,
    barrier: ExplosionBarrier | None = None,
    n_paths: int = 100_000,
    t_eval: float | None = None,
    *,
    seed: int,
    allocation: GirsanovAllocation | None = None,
    eps1: float = 0.05,
    eps2: float = 1.0,
    scheme: str = "euler",
    confidence: float = 0.95,
    refine: bool = True,
    antithetic: bool = False,
    zero_noise: bool = False,
    threads: int = 1,
    h_schedule=None,
) -> DefectStudy:
    """Estimate ``S0 - E[S_{t ^ tau}]`` under the enlarged dynamics at h and h/2.

    Without an enlargement this is the plain model (a martingale control when
    the model is one).
    """
    grid = grid or TimeGrid(model.T, 256)
    t = grid.T if t_eval is None else float(t_eval)
    z = z_value(confidence)
    grids = [grid, grid.halved()] if refine else [grid]
    reports = []
    for stream, g in enumerate(grids):
        batch = simulate_enlarged(
            model, enlargement, g, barrier, n_paths=n_paths, seed=seed, t_eval=[t], allocation=allocation,
            eps1=eps1, eps2=eps2, scheme=scheme, antithetic=antithetic, zero_noise=zero_noise,
            threads=threads, stream=stream,
        )
        notes = []
        if enlargement is not None:
            notes.append(f"enlargement {enlargement.kind}")
            if "novikov" in batch.extras:
                sched = h_schedule or {m: float(m) for m in (1, 2, 5, 10, 20, 50, 100)}
                mc = validate_measure_change(batch.extras["novikov"][batch.gate], sched)
                notes.append(mc.note())
        reports.append(report_from_batch(batch, t, model.S0, z=z, notes="; ".join(notes)))
    return combine_studies(reports[0], reports[1] if refine else None)


def defect_curve(
    model: VolatilityModelSpec,
    enlargement: EnlargementSpec | None,
    grid: TimeGrid,
    t_evals: Sequence[float],
    *,
    n_paths: int,
    seed: int,
    barrier: ExplosionBarrier | None = None,
    allocation: GirsanovAllocation | None = None,
    eps1: float = 0.05,
    eps2: float = 1.0,
    confidence: float = 0.95,
    threads: int = 1,
) -> list[DefectReport]:
    """Defect reports at several times from one batch (input for the supermartingale scan)."""
    batch = simulate_enlarged(
        model, enlargement, grid, barrier, n_paths=n_paths, seed=seed, t_eval=list(t_evals),
        allocation=allocation, eps1=eps1, eps2=eps2, threads=threads,
    )
    z = z_value(confidence)
    return [report_from_batch(batch, t, model.S0, z=z) for t in t_evals]


def estimate_scalar_defect(
    sigma: Callable,
    S0: float,
    grid: TimeGrid,
    barrier: ExplosionBarrier | None = None,
    n_paths: int = 100_000,
    t_eval: float | Sequence[float] | None = None,
    *,
    seed: int,
    confidence: float = 0.95,
    refine: bool = True,
    threads: int = 1,
):
    """Defect of ``dX = X sigma(X) dB``. A sequence of times returns one report per time at step h."""
    z = z_value(confidence)
    if t_eval is not None and np.ndim(t_eval) == 1:
        batch = simulate_scalar_sde(sigma, S0, grid, barrier, seed, n_paths=n_paths, t_eval=list(t_eval), threads=threads)
        return [report_from_batch(batch, float(t), S0, z=z) for t in t_eval]
    t = grid.T if t_eval is None else float(t_eval)
    grids = [grid, grid.halved()] if refine else [grid]
    reports = []
    for stream, g in enumerate(grids):
        batch = simulate_scalar_sde(sigma, S0, g, barrier, seed, n_paths=n_paths, t_eval=[t], threads=threads, stream=stream)
        reports.append(report_from_batch(batch, t, S0, z=z))
    return combine_studies(reports[0], reports[1] if refine else None)


# --------------------------------------------------------------------------
# optional-stopping decomposition


@dataclass(frozen=True)
class DecompositionResult:
    level: float
    t_eval: float
    term_continue: float  # E[S_{t ^ tau} 1{t ^ tau < T_n}]
    term_barrier: float  # E[S_{T_n} 1{T_n <= t ^ tau}]
    residual: float  # S0 - (sum of the two terms)
    std_error: float
    mode: str

    @property
    def straddles_zero(self) -> bool:
        return abs(self.residual) <= 3.0 * self.std_error or self.residual == 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "level": self.level,
            "t_eval": self.t_eval,
            "term_continue": self.term_continue,
            "term_barrier": self.term_barrier,
            "residual": self.residual,
            "std_error": self.std_error,
            "straddles_zero": self.straddles_zero,
            "mode": self.mode,
        }


def _hit_by(batch: PathBatch, level: float, t: float) -> np.ndarray:
    j = batch.level_column(level)
    idx = int(round(t / batch.meta["h"]))
    li = batch.level_hit[:, j]
    return (li >= 0) & (li <= idx)


def decomposition_check(bundles, t_eval: float, level: float, S0: float | None = None) -> DecompositionResult:
    """Residual of ``S0 = E[S_{t^T_n} 1{t < T_n}] + E[S_{T_n} 1{T_n <= t}]``.

    `bundles` is either one batch simulated under P (the barrier term is the
    average overshoot value), or a pair ``(P batch, P-hat batch)`` where the
    second was simulated with S as numeraire and the barrier term is
    ``S0 * P-hat(T_n <= t)``.
    """
    if isinstance(bundles, PathBatch):
        p_batch, hat = bundles, None
    else:
        p_batch, hat = bundles
    S0 = float(S0 if S0 is not None else p_batch.meta.get("S0", 1.0))
    col = p_batch.eval_column(t_eval)
    g = p_batch.gate
    hit = _hit_by(p_batch, level, t_eval)
    j = p_batch.level_column(level)
    cont = np.where(hit, 0.0, p_batch.S_eval[:, col])[g]
    shard = p_batch.meta.get("shard_size", SHARD_SIZE)
    a_cont = MeanAccumulator.from_shards(cont, shard)
    if hat is None:
        over = np.where(hit, p_batch.S_at_level[:, j], 0.0)[g]
        a_all = MeanAccumulator.from_shards(cont + over, shard)
        a_over = MeanAccumulator.from_shards(over, shard)
        res = S0 - a_all.mean
        return DecompositionResult(level, t_eval, a_cont.mean, a_over.mean, res, a_all.std_error, "direct")
    hg = hat.gate
    ind = _hit_by(hat, level, t_eval)[hg].astype(float)
    a_hat = MeanAccumulator.from_shards(ind, hat.meta.get("shard_size", SHARD_SIZE))
    term_b = S0 * a_hat.mean
    res = S0 - (a_cont.mean + term_b)
    se = math.hypot(a_cont.std_error, S0 * a_hat.std_error)
    return DecompositionResult(level, t_eval, a_cont.mean, term_b, res, se, "numeraire")


# --------------------------------------------------------------------------
# explosion probability under the S-numeraire measure


@dataclass(frozen=True)
class ExplosionEntry:
    level: float
    probability: float
    std_error: float

    def to_dict(self) -> dict[str, float]:
        return {"n": self.level, "probability": self.probability, "std_error": self.std_error}


@dataclass(frozen=True)
class ExplosionReport:
    entries: tuple[ExplosionEntry, ...]
    t_eval: float
    n_paths: int
    monotone: bool

    @property
    def liminf_proxy(self) -> float:
        return self.entries[-1].probability

    def to_dict(self) -> dict[str, Any]:
        return {
            "t_eval": self.t_eval,
            "n_paths": self.n_paths,
            "entries": [e.to_dict() for e in self.entries],
            "liminf_proxy": self.liminf_proxy,
            "monotone_within_ci": self.monotone,
        }


def explosion_report(batch: PathBatch, t_eval: float, z: float = 1.96) -> ExplosionReport:
    g = batch.gate
    n = int(g.sum())
    entries = []
    for lv in batch.levels:
        ind = _hit_by(batch, lv, t_eval)[g]
        p = float(ind.mean()) if n else math.nan
        entries.append(ExplosionEntry(lv, p, math.sqrt(max(p * (1 - p), 0.0) / max(n, 1))))
    mono = all(
        b.probability <= a.probability + z * math.hypot(a.std_error, b.std_error)
        for a, b in zip(entries, entries[1:])
    )
    return ExplosionReport(tuple(entries), float(t_eval), n, mono)


def explosion_probability(
    model: VolatilityModelSpec,
    grid: TimeGrid,
    barrier: ExplosionBarrier | None = None,
    n_paths: int = 100_000,
    t_eval: float | None = None,
    *,
    seed: int,
    enlargement: EnlargementSpec | None = None,
    allocation: GirsanovAllocation | None = None,
    eps1: float = 0.05,
    eps2: float = 1.0,
    zero_noise: bool = False,
    threads: int = 1,
) -> ExplosionReport:
    """``P-hat(T_n <= t ^ tau)`` per barrier level, simulating under the S-numeraire measure."""
    t = grid.T if t_eval is None else float(t_eval)
    batch = simulate_enlarged(
        model, enlargement, grid, barrier, n_paths=n_paths, seed=seed, t_eval=[t], allocation=allocation,
        eps1=eps1, eps2=eps2, numeraire=True, zero_noise=zero_noise, threads=threads,
    )
    return explosion_report(batch, t)


# --------------------------------------------------------------------------
# comparison of drift-ordered coupled diffusions


@dataclass(frozen=True)
class ComparisonEntry:
    h: float
    violations: int
    points: int
    paths_violating: int
    n_paths: int

    @property
    def fraction(self) -> float:
        return self.violations / self.points if self.points else 0.0

    @property
    def path_fraction(self) -> float:
        return self.paths_violating / self.n_paths if self.n_paths else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "h": self.h,
            "violations": self.violations,
            "points": self.points,
            "violation_fraction": self.fraction,
            "paths_violating": self.paths_violating,
            "path_fraction": self.path_fraction,
        }


@dataclass(frozen=True)
class ComparisonResult:
    entries: tuple[ComparisonEntry, ...]

    @property
    def nonincreasing(self) -> bool:
        fr = [e.fraction for e in sorted(self.entries, key=lambda e: -e.h)]
        return all(b <= a for a, b in zip(fr, fr[1:]))

    def at(self, h: float) -> ComparisonEntry:
        for e in self.entries:
            if math.isclose(e.h, h, rel_tol=1e-12):
                return e
        raise KeyError(h)

    def to_dict(self) -> dict[str, Any]:
        return {"entries": [e.to_dict() for e in self.entries], "nonincreasing_in_h": self.nonincreasing}


DEFAULT_HS = (2.0**-6, 2.0**-8, 2.0**-10)


def _shared_increments(n_paths: int, n_fine: int, seed: int, stream: int, T: float) -> np.ndarray:
    rng = shard_rng(seed, 0, stream)
    return math.sqrt(T / n_fine) * rng.standard_normal((n_paths, n_fine))


def comparison_harness(
    drift_lo: Callable,
    drift_hi: Callable,
    mu: CoefficientFunction,
    x0: float,
    y0: float,
    *,
    hs: Sequence[float] = DEFAULT_HS,
    n_paths: int = 2000,
    T: float = 1.0,
    seed: int,
    zero_noise: bool = False,
) -> ComparisonResult:
    """Count grid points with X <= Y for dX = mu dW + drift_hi dt, dY = mu dW + drift_lo dt.

    All step sizes reuse one fine Brownian path per sample. Index 0 is
    skipped when x0 == y0.
    """
    if x0 < y0:
        raise ValueError("need x0 >= y0")
    hs = tuple(sorted(hs, reverse=True))
    grids = [TimeGrid.from_step(T, h) for h in hs]
    n_fine = max(g.n_steps for g in grids)
    dW_f = np.zeros((n_paths, n_fine)) if zero_noise else _shared_increments(n_paths, n_fine, seed, 0, T)
    noise = 0.0 if zero_noise else 1.0
    zero = CoefficientFunction("0")
    entries = []
    for g in grids:
        m = n_fine // g.n_steps
        dW = dW_f.reshape(n_paths, g.n_steps, m).sum(axis=2)
        X = np.full(n_paths, float(x0))
        Y = np.full(n_paths, float(y0))
        start = 1 if x0 == y0 else 0
        bad = np.zeros(n_paths, dtype=np.int64)
        if start == 0:
            bad += X <= Y
        for i in range(g.n_steps):
            t = g.t(i)
            X_new = v_step(mu, zero, X, g.h, dW[:, i], extra_drift=drift_hi(t, X), noise=noise)
            Y = v_step(mu, zero, Y, g.h, dW[:, i], extra_drift=drift_lo(t, Y), noise=noise)
            X = X_new
            bad += X <= Y
        points = n_paths * (g.n_steps + 1 - start)
        entries.append(ComparisonEntry(g.h, int(bad.sum()), points, int((bad > 0).sum()), n_paths))
    return ComparisonResult(tuple(entries))


def floor_comparison(
    model: VolatilityModelSpec,
    enlargement: EnlargementSpec,
    *,
    hs: Sequence[float] = DEFAULT_HS,
    n_paths: int = 2000,
    seed: int,
    allocation: GirsanovAllocation | None = None,
    eps1: float = 0.05,
    eps2: float = 1.0,
    barrier: ExplosionBarrier | None = None,
) -> ComparisonResult:
    """Enlarged v (drift b-hat, stopped at tau) against the floor diffusion
    with drift ``b + min(eps) mu^2 - max(eps) mu``, both driven by the same W.

    Only gate-passing paths and indices 1..tau are compared.
    """
    allocation = allocation or GirsanovAllocation(cap_eps2=eps2)
    lo_eps, hi_eps = min(eps1, eps2), max(eps1, eps2)
    entries = []
    for stream, h in enumerate(sorted(hs, reverse=True)):
        g = TimeGrid.from_step(model.T, h)
        batch = simulate_enlarged(
            model, enlargement, g, barrier, n_paths=n_paths, seed=seed, allocation=allocation,
            eps1=eps1, eps2=eps2, keep_paths=True, stream=stream,
        )
        V = batch.paths["v"]
        dW = np.diff(batch.paths["W"], axis=1)
        Y = np.full(n_paths, model.v0)
        bad = np.zeros(n_paths, dtype=np.int64)
        stop = batch.stop_index
        gate = batch.gate
        for i in range(g.n_steps):
            m = model.mu(Y)
            drift = lo_eps * m * m - hi_eps * m
            Y = v_step(model.mu, model.b, Y, g.h, dW[:, i], extra_drift=drift)
            live = gate & (i + 1 <= stop)
            bad += live & (V[:, i + 1] <= Y)
        points = int(np.minimum(stop, g.n_steps)[gate].sum())
        entries.append(ComparisonEntry(g.h, int(bad.sum()), points, int((bad > 0).sum()), int(gate.sum())))
    return ComparisonResult(tuple(entries))


# --------------------------------------------------------------------------
# supermartingale scan


@dataclass(frozen=True)
class ScanResult:
    times: tuple[float, ...]
    estimates: tuple[float, ...]
    std_errors: tuple[float, ...]
    nonincreasing: bool
    strictly_ordered: bool
    violations: tuple[tuple[float, float], ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "times": list(self.times),
            "estimates": list(self.estimates),
            "std_errors": list(self.std_errors),
            "nonincreasing_within_ci": self.nonincreasing,
            "strictly_ordered": self.strictly_ordered,
            "violations": [list(v) for v in self.violations],
        }


def supermartingale_scan(reports: Sequence[DefectReport], z: float | None = None) -> ScanResult:
    """Check that t -> E[S_{t ^ tau}] does not increase beyond interval overlap."""
    if len(reports) < 3:
        raise ValueError("need at least three evaluation times")
    rs = sorted(reports, key=lambda r: r.t_eval)
    viol = []
    for a, b in zip(rs, rs[1:]):
        zz = z if z is not None else a.z
        if b.estimate_E > a.estimate_E + zz * math.hypot(a.std_error, b.std_error):
            viol.append((a.t_eval, b.t_eval))
    strict = all(b.estimate_E < a.estimate_E for a, b in zip(rs, rs[1:]))
    return ScanResult(
        tuple(r.t_eval for r in rs), tuple(r.estimate_E for r in rs), tuple(r.std_error for r in rs),
        not viol, strict, tuple(viol),
    )


# --------------------------------------------------------------------------
# Girsanov identity


@dataclass(frozen=True)
class GirsanovCheck:
    weighted: float  # E_P[Z_T f(S_T)]
    weighted_se: float
    shifted: float  # E[f(S_T)] under drift-shifted dynamics
    shifted_se: float

    @property
    def difference(self) -> float:
        return self.weighted - self.shifted

    @property
    def std_error(self) -> float:
        return math.hypot(self.weighted_se, self.shifted_se)

    @property
    def agrees(self) -> bool:
        return abs(self.difference) <= 3.0 * self.std_error

    def to_dict(self) -> dict[str, Any]:
        return {
            "weighted": self.weighted,
            "weighted_se": self.weighted_se,
            "shifted": self.shifted,
            "shifted_se": self.shifted_se,
            "difference": self.difference,
            "agrees_within_3se": self.agrees,
        }


def girsanov_identity_check(
    model: VolatilityModelSpec,
    H: float,
    J: float,
    f: Callable[[np.ndarray], np.ndarray],
    grid: TimeGrid,
    n_paths: int,
    *,
    seed: int,
) -> GirsanovCheck:
    """Two independent simulations of the same Q-expectation.

    Route 1 weights P-paths by the density Z_T; route 2 simulates with the
    drivers shifted by the Girsanov drift.
    """
    p = simulate_paths(model, grid, ExplosionBarrier((math.inf,)), n_paths=n_paths, seed=seed, overlays=[DensityTracker(H, J, model.rho)], stream=0)
    q = simulate_paths(model, grid, ExplosionBarrier((math.inf,)), n_paths=n_paths, seed=seed, overlays=[MeasureShift(H, J, model.rho)], stream=1)
    a = MeanAccumulator.from_shards(p.extras["Z"] * f(p.S_eval[:, -1]))
    b = MeanAccumulator.from_shards(f(q.S_eval[:, -1]))
    return GirsanovCheck(a.mean, a.std_error, b.mean, b.std_error)
