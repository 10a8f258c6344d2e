"""One-shot experiment runner.

Exit codes: 0 on a completed experiment, 1 on any error (one JSON line on
stderr naming the offending field), 2 when ``--strict`` is set and the
verdict is inconclusive.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from ._asymptotics import geometric_grid
from .analyzer import (
    INCONCLUSIVE as A_INCONCLUSIVE,
    SATISFIED,
    VIOLATED,
    FellerSingularityError,
    feller_scale_classify,
    lm_martingale_check,
    lm_strict_check,
    phi_integrability,
    power_family_check,
)
from .coeffs import CoefficientEvaluationError, validate_coefficients
from .config import ConfigError, ExperimentConfig, load_config
from .engine import STOP_NAMES, Dynamics, NumericalBlowUpError, config_hash, resolve_scheme, simulate_paths, simulate_scalar_sde
from .enlargement import HypothesisGateError, KSingularityError, validate_measure_change
from .jumps import JumpFloorError, jump_positivity_check, moment_condition_estimate, simulate_jump_paths
from .stats import (
    INCONCLUSIVE,
    MeanAccumulator,
    defect_curve,
    estimate_defect,
    estimate_scalar_defect,
    explosion_report,
    simulate_enlarged,
    supermartingale_scan,
    floor_comparison,
    z_value,
)

ENV_OUT = "SLM_FORGE_OUT"
DEFAULT_OUT = "slm_forge_out"
DUMP_LIMIT = 1000  # paths written by --dump-paths


@dataclass
class Outcome:
    result: dict[str, Any]
    verdict: str
    rows: list[dict[str, Any]] = field(default_factory=list)
    paths: list[dict[str, Any]] = field(default_factory=list)


# --------------------------------------------------------------------------
# serialization


def jsonable(x: Any) -> Any:
    """Plain-JSON copy: numpy scalars unwrapped, non-finite floats as strings."""
    if isinstance(x, dict):
        return {str(k): jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [jsonable(v) for v in x.tolist()]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    return x


def dumps(obj: Any) -> str:
    return json.dumps(jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(rows: Sequence[dict[str, Any]]) -> str:
    buf = io.StringIO()
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else jsonable(v)) for k, v in r.items()})
    return buf.getvalue()


# --------------------------------------------------------------------------
# experiments


def _scheme_meta(cfg: ExperimentConfig) -> dict[str, Any]:
    grid = cfg.build_grid()
    meta: dict[str, Any] = {"h": grid.h, "n_steps": grid.n_steps, "T": grid.T, "requested": cfg.numerics.scheme}
    if cfg.model_config_entry().is_scalar:
        meta.update(scheme="euler", s_update="log-Euler", v_update=None)
    elif cfg.experiment == "jumps":
        sch = resolve_scheme(Dynamics.from_spec(cfg.build_model()), cfg.numerics.scheme)
        meta.update(scheme=sch, s_update="exact Poisson jump factors, exponential compensator", v_update=f"{sch} truncated at 0")
    else:
        sch = resolve_scheme(Dynamics.from_spec(cfg.build_model()), cfg.numerics.scheme)
        meta.update(scheme=sch, s_update="log-Euler", v_update=f"{sch} truncated at 0")
    if cfg.experiment in ("defect",) and cfg.numerics.refine:
        meta["refinement"] = [grid.h, grid.h / 2]
    return meta


def run_analyze(cfg: ExperimentConfig, **_) -> Outcome:
    spec = cfg.build_model()
    a = cfg.analysis
    phi = a.phi_function()
    eps1, eps2 = a.eps[0], a.eps[-1]
    grid = geometric_grid(1.0, a.x_max, per_decade=10)
    mart = lm_martingale_check(spec, grid)
    strict = lm_strict_check(spec, phi, eps1, eps2, grid)
    shape_ok, shape_note = phi.check_shape(grid)
    try:
        validation = validate_coefficients(spec, geometric_grid(1e-6, a.x_max, per_decade=10), x_max=a.x_max).to_dict()
    except CoefficientEvaluationError as err:
        # the asymptotic checks report non-finite tails themselves
        validation = {"passed": False, "error": str(err)}
    result: dict[str, Any] = {
        "validation": validation,
        "lm_martingale": mart.to_dict(),
        "lm_strict": strict.to_dict(),
        "phi_shape": {"ok": shape_ok, "note": shape_note},
        "phi_integrability": phi_integrability(phi, x_max=a.x_max).to_dict(),
    }
    if spec.is_power:
        try:
            pm, ps = power_family_check(spec, phi, eps1, eps2, grid)
            result["power_family"] = {"applicable": True, "martingale": pm.verdict, "strict": ps.verdict}
        except ValueError as err:
            result["power_family"] = {"applicable": False, "note": str(err)}
    verdicts = {mart.verdict, strict.verdict}
    if A_INCONCLUSIVE in verdicts:
        verdict = INCONCLUSIVE
    elif verdicts == {SATISFIED}:
        verdict = SATISFIED
    else:
        verdict = VIOLATED
    rows = [{"x": x, "martingale_ratio": m, "strict_ratio": s} for (x, m), (_, s) in zip(mart.trend_values, strict.trend_values)]
    return Outcome(result, verdict, rows)


def run_feller(cfg: ExperimentConfig, **_) -> Outcome:
    spec = cfg.build_model()
    a = cfg.analysis
    try:
        res = feller_scale_classify(spec, a.feller_c, a.feller_lower)
    except FellerSingularityError as err:
        raise ConfigError("analysis.feller_lower", str(err)) from None
    except ValueError as err:
        raise ConfigError("analysis.feller_c", str(err)) from None
    rows = [
        {"boundary": name, "divergent": bv.divergent, "value": None if bv.divergent else bv.value}
        for name, bv in (("upper", res.p_at_upper), ("lower", res.p_at_lower))
    ]
    return Outcome(res.to_dict(), res.classification, rows)


def _dump_rows(batch) -> list[dict[str, Any]]:
    out = []
    for j in range(batch.n_paths):
        for r in batch.bundle(j).csv_rows():
            out.append({"path": j, **r})
    return out


def _dump_enlarged(cfg: ExperimentConfig, threads: int) -> list[dict[str, Any]]:
    """Separate run of up to DUMP_LIMIT full paths of the defect dynamics."""
    n = cfg.numerics
    m = min(n.n_paths, DUMP_LIMIT)
    grid, barrier = cfg.build_grid(), cfg.build_barrier()
    entry = cfg.model_config_entry()
    if entry.is_scalar:
        batch = simulate_scalar_sde(entry.scalar_sigma(), entry.S0, grid, barrier, n.seed, n_paths=m, keep_paths=True, threads=threads)
    else:
        batch = simulate_enlarged(
            cfg.build_model(), cfg.build_enlargement(), grid, barrier, n_paths=m, seed=n.seed,
            allocation=cfg.build_allocation(), eps1=n.eps1, eps2=n.eps2, scheme=n.scheme, keep_paths=True, threads=threads,
        )
    return _dump_rows(batch)


def run_simulate(cfg: ExperimentConfig, *, threads: int, dump_paths: bool) -> Outcome:
    n = cfg.numerics
    grid, barrier, ts = cfg.build_grid(), cfg.build_barrier(), cfg.t_evals()
    entry = cfg.model_config_entry()
    common = dict(n_paths=n.n_paths, t_eval=ts, zero_noise=n.zero_noise, antithetic=n.antithetic, threads=threads)
    if entry.is_scalar:
        sim = lambda m, keep: simulate_scalar_sde(  # noqa: E731
            entry.scalar_sigma(), entry.S0, grid, barrier, n.seed, **{**common, "n_paths": m}, keep_paths=keep
        )
    else:
        spec = cfg.build_model()
        sim = lambda m, keep: simulate_paths(  # noqa: E731
            spec, grid, barrier, seed=n.seed, scheme=n.scheme, keep_paths=keep, **{**common, "n_paths": m}
        )
    batch = sim(n.n_paths, False)
    rows = []
    for t in ts:
        c = batch.eval_column(t)
        S = MeanAccumulator.from_shards(batch.S_eval[:, c])
        v = MeanAccumulator.from_shards(batch.v_eval[:, c])
        rows.append({"t": t, "mean_S": S.mean, "se_S": S.std_error, "mean_v": v.mean, "se_v": v.std_error})
    codes = np.bincount(batch.stop_code.astype(np.int64), minlength=len(STOP_NAMES))
    result = {
        "eval": rows,
        "stop_reasons": {STOP_NAMES[i]: int(codes[i]) for i in sorted(STOP_NAMES)},
        "barrier_hits": explosion_report(batch, ts[-1], z_value(n.confidence)).to_dict(),
        "s_underflow_clamps": batch.meta.get("s_underflow_clamps", 0),
    }
    paths = _dump_rows(sim(min(n.n_paths, DUMP_LIMIT), True)) if dump_paths else []
    return Outcome(result, "completed", rows, paths)


def run_defect(cfg: ExperimentConfig, *, threads: int, dump_paths: bool = False) -> Outcome:
    n = cfg.numerics
    grid, barrier, ts = cfg.build_grid(), cfg.build_barrier(), cfg.t_evals()
    entry = cfg.model_config_entry()
    t = ts[-1]
    if entry.is_scalar:
        study = estimate_scalar_defect(
            entry.scalar_sigma(), entry.S0, grid, barrier, n.n_paths, t, seed=n.seed,
            confidence=n.confidence, refine=n.refine, threads=threads,
        )
    else:
        study = estimate_defect(
            cfg.build_model(), cfg.build_enlargement(), grid, barrier, n.n_paths, t, seed=n.seed,
            allocation=cfg.build_allocation(), eps1=n.eps1, eps2=n.eps2, scheme=n.scheme, confidence=n.confidence,
            refine=n.refine, antithetic=n.antithetic, zero_noise=n.zero_noise, threads=threads,
        )
    result: dict[str, Any] = {"study": study.to_dict()}
    reports = [study.coarse] + ([study.fine] if study.fine else [])
    if len(ts) >= 3 and not entry.is_scalar:
        curve = defect_curve(
            cfg.build_model(), cfg.build_enlargement(), grid, ts, n_paths=n.n_paths, seed=n.seed, barrier=barrier,
            allocation=cfg.build_allocation(), eps1=n.eps1, eps2=n.eps2, confidence=n.confidence, threads=threads,
        )
        result["scan"] = supermartingale_scan(curve).to_dict()
        reports += curve
    elif len(ts) >= 3:
        curve = estimate_scalar_defect(entry.scalar_sigma(), entry.S0, grid, barrier, n.n_paths, ts, seed=n.seed, confidence=n.confidence, threads=threads)
        result["scan"] = supermartingale_scan(curve).to_dict()
        reports += curve
    rows = [{k: v for k, v in r.to_dict().items() if k != "bias_notes"} for r in reports]
    paths = _dump_enlarged(cfg, threads) if dump_paths else []
    return Outcome(result, study.verdict, rows, paths)


def run_compare(cfg: ExperimentConfig, **_) -> Outcome:
    n = cfg.numerics
    res = floor_comparison(
        cfg.build_model(), cfg.build_enlargement(), hs=n.hs, n_paths=n.n_paths, seed=n.seed,
        allocation=cfg.build_allocation(), eps1=n.eps1, eps2=n.eps2, barrier=cfg.build_barrier(),
    )
    finest = min(res.entries, key=lambda e: e.h)
    ordered = finest.fraction <= 1e-3 and res.nonincreasing
    return Outcome(res.to_dict(), "ordered" if ordered else VIOLATED, [e.to_dict() for e in res.entries])


def run_jumps(cfg: ExperimentConfig, *, threads: int, dump_paths: bool) -> Outcome:
    n = cfg.numerics
    spec, driver, grid = cfg.build_jump_model(), cfg.jumps.driver(), cfg.build_grid()
    pos = jump_positivity_check(spec, driver)
    ts = cfg.t_evals()
    run = lambda m, keep: simulate_jump_paths(  # noqa: E731
        spec, driver, grid, cfg.build_barrier(), n_paths=m, seed=n.seed, t_eval=ts, guard=cfg.jumps.guard,
        scheme=n.scheme, keep_paths=keep, threads=threads,
    )
    batch = run(n.n_paths, False)
    rows = []
    for t in ts:
        c = batch.eval_column(t)
        M = MeanAccumulator.from_shards(batch.extras["M_eval"][:, c])
        S = MeanAccumulator.from_shards(batch.S_eval[:, c])
        rows.append({"t": t, "mean_M": M.mean, "se_M": M.std_error, "mean_S": S.mean, "se_S": S.std_error})
    QV = MeanAccumulator.from_shards(batch.extras["QV"])
    mom = moment_condition_estimate(spec, driver, grid, n.n_paths, seed=n.seed, confidence=n.confidence)
    codes = np.bincount(batch.stop_code.astype(np.int64), minlength=len(STOP_NAMES))
    result = {
        "positivity": pos.to_dict(),
        "eval": rows,
        "quadratic_variation": {"mean": QV.mean, "std_error": QV.std_error, "angle_bracket_rate": driver.angle_bracket_rate},
        "moment_condition": mom.to_dict(),
        "stop_reasons": {STOP_NAMES[i]: int(codes[i]) for i in sorted(STOP_NAMES)},
    }
    paths = _dump_rows(run(min(n.n_paths, DUMP_LIMIT), True)) if dump_paths else []
    return Outcome(result, "moment-finite" if mom.finite else INCONCLUSIVE, rows, paths)


def run_validate_q(cfg: ExperimentConfig, *, threads: int, dump_paths: bool = False) -> Outcome:
    n = cfg.numerics
    batch = simulate_enlarged(
        cfg.build_model(), cfg.build_enlargement(), cfg.build_grid(), cfg.build_barrier(), n_paths=n.n_paths,
        seed=n.seed, allocation=cfg.build_allocation(), eps1=n.eps1, eps2=n.eps2, scheme=n.scheme, threads=threads,
    )
    nov = batch.extras["novikov"][batch.gate] if "novikov" in batch.extras else np.zeros(int(batch.gate.sum()))
    rep = validate_measure_change(nov, {m: float(m) for m in (1, 2, 5, 10, 20, 50, 100)})
    result = {"measure_change": rep.to_dict(), "note": rep.note(), "gate_fraction": float(batch.gate.mean())}
    rows = [lv.to_dict() for lv in rep.levels]
    paths = _dump_enlarged(cfg, threads) if dump_paths else []
    return Outcome(result, "validated" if rep.validated else INCONCLUSIVE, rows, paths)


RUNNERS = {
    "analyze": run_analyze,
    "feller": run_feller,
    "simulate": run_simulate,
    "defect": run_defect,
    "compare": run_compare,
    "jumps": run_jumps,
    "validate-q": run_validate_q,
}


# --------------------------------------------------------------------------
# entry point


def report_hash(cfg: ExperimentConfig) -> str:
    """Hash of the validated config; the output table does not affect results."""
    d = cfg.canonical()
    d.pop("output", None)
    return config_hash(d)


def build_report(cfg: ExperimentConfig, outcome: Outcome) -> dict[str, Any]:
    return {
        "experiment": cfg.experiment,
        "config_hash": report_hash(cfg),
        "config": {k: v for k, v in cfg.canonical().items() if k != "output"},
        "seed": cfg.numerics.seed,
        "scheme": _scheme_meta(cfg),
        "verdict": outcome.verdict,
        "result": outcome.result,
        "version": __version__,
    }


def resolve_out_dir(cli_out: str | None, cfg: ExperimentConfig) -> Path:
    """--out, then the config's output.dir, then $SLM_FORGE_OUT, then ./slm_forge_out."""
    return Path(cli_out or cfg.output.dir or os.environ.get(ENV_OUT) or DEFAULT_OUT)


def write_outputs(out: Path, cfg: ExperimentConfig, outcome: Outcome, argv: Sequence[str], threads: int) -> dict[str, Path]:
    stem = cfg.experiment.replace("-", "_")
    written: dict[str, Path] = {}
    report = build_report(cfg, outcome)
    if "json" in cfg.output.formats:
        written["json"] = out / f"{stem}_report.json"
        atomic_write(written["json"], dumps(report))
    if "csv" in cfg.output.formats and outcome.rows:
        written["csv"] = out / f"{stem}_rows.csv"
        atomic_write(written["csv"], csv_text(outcome.rows))
    if outcome.paths:
        written["paths"] = out / f"{stem}_paths.csv"
        atomic_write(written["paths"], csv_text(outcome.paths))
    sidecar = {
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "argv": list(argv),
        "threads": threads,
        "config_hash": report["config_hash"],
        "files": {k: p.name for k, p in written.items()},
        "version": __version__,
    }
    written["meta"] = out / f"{stem}_report.meta.json"
    atomic_write(written["meta"], dumps(sidecar))
    return written


def _error(kind: str, field: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "field": field, "message": message}, sort_keys=True) + "\n")
    return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slm-forge", description="Run one strict-local-martingale experiment from a config file.")
    p.add_argument("--config", required=True, help="TOML or JSON experiment config")
    p.add_argument("--seed", type=int, default=None, help="override numerics.seed")
    p.add_argument("--threads", type=int, default=1, help="cap on worker threads (results do not depend on it)")
    p.add_argument("--strict", action="store_true", help="exit 2 when the verdict is inconclusive")
    p.add_argument("--dump-paths", action="store_true", help=f"also write up to {DUMP_LIMIT} full paths as CSV")
    p.add_argument("--out", default=None, help=f"output directory (fallback: config output.dir, ${ENV_OUT})")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        return _error("config", "threads", "must be at least 1")
    try:
        cfg = load_config(args.config, seed=args.seed)
        outcome = RUNNERS[cfg.experiment](cfg, threads=args.threads, dump_paths=args.dump_paths)
        written = write_outputs(resolve_out_dir(args.out, cfg), cfg, outcome, argv, args.threads)
    except ConfigError as err:
        return _error("config", err.field, err.message)
    except KSingularityError as err:
        return _error("numerics", "numerics.delta_guard", str(err))
    except HypothesisGateError as err:
        return _error("numerics", "numerics.eps1", str(err))
    except JumpFloorError as err:
        return _error("numerics", "jumps.guard", str(err))
    except (NumericalBlowUpError, CoefficientEvaluationError) as err:
        return _error("numerics", "numerics.h", str(err))
    except ValueError as err:
        return _error("invalid", "config", str(err))
    except OSError as err:
        return _error("io", "output.dir", str(err))
    sys.stdout.write(json.dumps({"verdict": outcome.verdict, "files": {k: str(p) for k, p in written.items()}}, sort_keys=True) + "\n")
    if args.strict and outcome.verdict == INCONCLUSIVE:
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
