import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slm_forge.coeffs import basic_model, capped, lm_drift, lm_model, power, zero
from slm_forge.engine import ExplosionBarrier, TimeGrid, simulate_paths, simulate_scalar_sde
from slm_forge.enlargement import EnlargementSpec, HypothesisGateError
from slm_forge.stats import (
    DETECTED,
    INCONCLUSIVE,
    MARTINGALE,
    DefectReport,
    MeanAccumulator,
    combine_studies,
    comparison_harness,
    decomposition_check,
    defect_curve,
    defect_verdict,
    estimate_defect,
    estimate_scalar_defect,
    explosion_probability,
    girsanov_identity_check,
    supermartingale_scan,
    z_value,
)

UNIT_VOL = basic_model(zero(), zero(), 0.0)
values = st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=3, max_size=60)


@settings(max_examples=100, deadline=None)
@given(xs=values, cut=st.tuples(st.integers(1, 59), st.integers(1, 59)))
def test_accumulator_merge_is_associative(xs, cut):
    i, j = sorted(min(c, len(xs) - 1) for c in cut)
    a, b, c = (MeanAccumulator().add(p) for p in (xs[:i], xs[i:j], xs[j:]))
    left = a.merge(b).merge(c)
    right = a.merge(b.merge(c))
    assert left.n == right.n == len(xs)
    assert left.mean == pytest.approx(right.mean, rel=1e-12, abs=1e-12)
    assert left.variance == pytest.approx(right.variance, rel=1e-12, abs=1e-9)


def test_accumulator_matches_numpy():
    x = np.random.default_rng(0).normal(3.0, 2.0, 100_003)
    acc = MeanAccumulator.from_shards(x, 1000)
    assert acc.mean == pytest.approx(x.mean(), rel=1e-12)
    assert acc.variance == pytest.approx(x.var(ddof=1), rel=1e-9)
    assert acc.std_error == pytest.approx(x.std(ddof=1) / math.sqrt(x.size), rel=1e-9)
    assert math.isnan(MeanAccumulator().mean)


def test_z_value():
    assert z_value(0.95) == pytest.approx(1.959964, rel=1e-6)
    with pytest.raises(ValueError):
        z_value(1.0)


@pytest.mark.parametrize(
    "defect,se,verdict", [(0.1, 0.01, DETECTED), (0.01, 0.01, MARTINGALE), (-0.01, 0.01, MARTINGALE), (-0.1, 0.01, INCONCLUSIVE)]
)
def test_defect_verdict(defect, se, verdict):
    assert defect_verdict(defect, se, 1.96) == verdict


def _report(defect, se):
    return DefectReport(1.0, 1.0 - defect, defect, se, 1000, defect_verdict(defect, se, 1.96), "")


@pytest.mark.parametrize(
    "coarse,fine,verdict",
    [
        ((0.3, 0.01), (0.31, 0.01), DETECTED),
        ((0.0, 0.01), (0.005, 0.01), MARTINGALE),
        ((0.3, 0.01), (0.0, 0.01), INCONCLUSIVE),
        ((0.3, 0.01), (0.6, 0.01), INCONCLUSIVE),
        ((-0.3, 0.01), (-0.3, 0.01), INCONCLUSIVE),
    ],
)
def test_combine_studies(coarse, fine, verdict):
    assert combine_studies(_report(*coarse), _report(*fine)).verdict == verdict
    assert combine_studies(_report(*coarse), None).verdict == defect_verdict(*coarse, 1.96)


def test_unit_volatility_control_is_martingale_consistent():
    study = estimate_defect(UNIT_VOL, None, TimeGrid(1.0, 64), n_paths=20_000, seed=1)
    assert study.verdict == MARTINGALE
    assert abs(study.coarse.defect) <= 3 * study.coarse.std_error


def test_gate_failure_everywhere_raises():
    enl = EnlargementSpec("BrownianTerminal")
    with pytest.raises(HypothesisGateError, match="hypothesis gate failed"):
        estimate_defect(lm_model(), enl, TimeGrid(1.0, 16), n_paths=200, seed=1, eps1=100.0)


def test_inverse_bessel_defect_small_run():
    study = estimate_scalar_defect(lambda x: -x, 1.0, TimeGrid(1.0, 256), ExplosionBarrier((1e3,)), 20_000, seed=3)
    assert study.verdict == DETECTED
    assert study.coarse.defect == pytest.approx(1 - 0.6827, abs=4 * study.coarse.std_error)


def test_decomposition_without_barrier_hits():
    batch = simulate_scalar_sde(lambda x: np.ones_like(x), 1.0, TimeGrid(1.0, 64), ExplosionBarrier((1e9,)), 2, n_paths=20_000)
    res = decomposition_check(batch, 1.0, 1e9)
    assert res.term_barrier == 0.0 and res.straddles_zero


def test_decomposition_zero_noise_is_exact():
    batch = simulate_paths(UNIT_VOL, TimeGrid(1.0, 16), ExplosionBarrier((10.0,)), n_paths=10, seed=0, zero_noise=True)
    res = decomposition_check(batch, 1.0, 10.0)
    assert res.residual == 0.0 and res.std_error == 0.0


def test_decomposition_with_barrier_hits_small_run():
    grid, barrier = TimeGrid(1.0, 256), ExplosionBarrier((20.0,))
    p = simulate_scalar_sde(lambda x: x, 1.0, grid, barrier, 6, n_paths=20_000, t_eval=[1.0])
    q = simulate_scalar_sde(lambda x: x, 1.0, grid, barrier, 6, n_paths=20_000, t_eval=[1.0], numeraire=True, stream=1)
    res = decomposition_check((p, q), 1.0, 20.0)
    assert res.term_barrier > 0 and res.straddles_zero


def test_bounded_coefficients_do_not_explode():
    spec = basic_model(capped(1.0, 1.0), capped(0.5, 1.0), 0.5)
    rep = explosion_probability(spec, TimeGrid(1.0, 64), ExplosionBarrier((10.0, 100.0, 1e3)), 5000, seed=4)
    assert [e.probability for e in rep.entries] == [0.0, 0.0, 0.0]


def test_zero_noise_explosion_probability_is_zero():
    rep = explosion_probability(lm_model(), TimeGrid(1.0, 64), ExplosionBarrier((10.0, 1e3)), 100, seed=4, zero_noise=True)
    assert rep.liminf_proxy == 0.0 and rep.monotone


@pytest.mark.xfail(
    strict=True,
    reason="on [0, tau) the floors bound S v by eps2 / (rho eps1), so v cannot reach 1e3 before tau",
)
def test_enlarged_lm_reaches_top_barrier_before_tau():
    rep = explosion_probability(
        lm_model(0.5, 1.0), TimeGrid(1.0, 256), ExplosionBarrier((10.0, 100.0, 1e3)), 20_000, seed=5,
        enlargement=EnlargementSpec("BrownianTerminal"), eps1=0.05, eps2=1.0,
    )
    top = rep.entries[-1]
    assert top.probability - 1.96 * top.std_error > 0


def test_comparison_identical_drift_shifted_start():
    b = lm_drift(0.5)
    res = comparison_harness(lambda t, x: b(x), lambda t, x: b(x), power(1.0, 1.0), 2.0, 1.0, n_paths=500, seed=7)
    assert res.at(2.0**-10).fraction <= 1e-3


def test_comparison_zero_noise_unit_gap():
    res = comparison_harness(
        lambda t, x: np.zeros_like(x), lambda t, x: np.ones_like(x), power(1.0, 1.0), 1.0, 1.0,
        hs=(2.0**-4,), n_paths=3, seed=0, zero_noise=True,
    )
    e = res.entries[0]
    assert e.violations == 0 and e.points == 3 * 16


def test_comparison_needs_ordered_start():
    with pytest.raises(ValueError):
        comparison_harness(lambda t, x: x, lambda t, x: x, power(1.0, 1.0), 0.0, 1.0, seed=0)


def test_scan_unit_volatility_is_flat():
    reps = defect_curve(UNIT_VOL, None, TimeGrid(1.0, 64), [0.25, 0.5, 1.0], n_paths=20_000, seed=8)
    assert supermartingale_scan(reps).nonincreasing


def test_scan_inverse_bessel_is_strictly_ordered():
    times = [0.25, 0.5, 1.0]
    reps = estimate_scalar_defect(lambda x: -x, 1.0, TimeGrid(1.0, 256), ExplosionBarrier((1e3,)), 20_000, times, seed=9)
    scan = supermartingale_scan(reps)
    assert scan.strictly_ordered and scan.nonincreasing
    for r, exact in zip(reps, (0.954, 0.843, 0.683)):
        assert r.estimate_E == pytest.approx(exact, abs=4 * r.std_error + 1e-3)


def test_scan_needs_three_times():
    with pytest.raises(ValueError):
        supermartingale_scan([_report(0.0, 0.01)] * 2)


def test_scan_enlarged_lm_is_nonincreasing():
    reps = defect_curve(lm_model(0.5, 1.0), EnlargementSpec("BrownianTerminal"), TimeGrid(1.0, 128), [0.25, 0.5, 0.75], n_paths=20_000, seed=10)
    assert supermartingale_scan(reps).nonincreasing


def test_girsanov_small_run():
    chk = girsanov_identity_check(UNIT_VOL, 0.5, 0.2, lambda x: np.minimum(x, 2.0), TimeGrid(1.0, 64), 20_000, seed=11)
    assert chk.agrees
