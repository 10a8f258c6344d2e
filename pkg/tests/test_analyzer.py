import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slm_forge._asymptotics import geometric_grid, tail_trend
from slm_forge.analyzer import (
    INCONCLUSIVE,
    NO_EXPLOSION,
    POSSIBLE_EXPLOSION,
    SATISFIED,
    VIOLATED,
    FellerSingularityError,
    feller_scale_classify,
    lm_martingale_check,
    lm_strict_check,
    phi_integrability,
    power_family_check,
)
from slm_forge.coeffs import (
    PhiFunction,
    basic_model,
    constant,
    exp_decay,
    lm_drift,
    lm_model,
    make_power_family,
    power,
    power_family_drift,
    sin_term,
    tabulated,
    zero,
)

X2 = PhiFunction(power(1.0, 2.0))


def test_lm_quantity_is_identically_one():
    v = lm_martingale_check(lm_model(0.5, 1.0))
    assert v.verdict == SATISFIED
    np.testing.assert_allclose([val for _, val in v.trend_values], 1.0, rtol=1e-9)


def test_zero_drift_zero_correlation_is_satisfied():
    v = lm_martingale_check(basic_model(power(1.0, 1.0), zero(), 0.0))
    assert v.verdict == SATISFIED and v.limit == 0.0


def test_superlinear_drift_violates():
    v = lm_martingale_check(basic_model(power(1.0, 1.0), power(1.0, 2.0), 0.5))
    assert v.verdict == VIOLATED
    xs, vals = zip(*v.trend_values)
    np.testing.assert_allclose(vals, 1.5 * np.asarray(xs), rtol=1e-12)


def test_lm_strict_limit():
    v = lm_strict_check(lm_model(0.5, 1.0), X2, 0.1, 0.1)
    assert v.verdict == SATISFIED
    assert v.limit == pytest.approx(0.1, rel=1e-6)
    # the ratio is exactly 0.1 + 0.9 / x
    xs, vals = map(np.asarray, zip(*v.trend_values))
    np.testing.assert_allclose(vals, 0.1 + 0.9 / xs, rtol=1e-9)


def test_all_zero_strict_is_violated():
    v = lm_strict_check(basic_model(power(1.0, 1.0), zero(), 0.0), X2, 0.0, 0.0)
    assert v.verdict == VIOLATED


def test_drift_free_strict_with_correlation_is_satisfied():
    # rho x^2 + eps x^2 - eps x over x^2 tends to rho + eps = 0.6
    v = lm_strict_check(basic_model(power(1.0, 1.0), zero(), 0.5), X2, 0.1, 0.1)
    assert v.verdict == SATISFIED and v.limit == pytest.approx(0.6, rel=1e-5)


def test_power_family_strict_ratio_grows():
    spec = make_power_family(1.0, 1.0, 1.0, 1.0, power(-0.5, 2.0), 0.5)
    v = lm_strict_check(spec, PhiFunction(power(1.0, 1.5)), 0.1, 0.1)
    assert v.verdict == SATISFIED and v.limit == math.inf


def test_oscillating_tail_is_inconclusive():
    b = tabulated(geometric_grid(1.0, 1e6, per_decade=1), [(-1) ** i * 10.0**i for i in range(7)])
    v = lm_martingale_check(basic_model(zero(), b, 0.0))
    assert v.verdict == INCONCLUSIVE
    assert "sign" in v.extrapolation_note


def test_overflow_is_inconclusive():
    v = lm_martingale_check(basic_model(power(1.0, 1.0), exp_decay(1.0, -1.0), 0.5))
    assert v.verdict == INCONCLUSIVE and "overflow" in v.extrapolation_note


@pytest.mark.parametrize("grid", [geometric_grid(1.0, 1e5), [3.0, 2.0, 1e7], [-1.0, 1.0, 1e7]])
def test_grid_preconditions(grid):
    with pytest.raises(ValueError):
        lm_martingale_check(lm_model(), grid)


def test_nonpositive_phi_rejected():
    with pytest.raises(ValueError, match="phi must be positive"):
        lm_strict_check(lm_model(), PhiFunction(sin_term(1.0)), 0.1, 0.1)


def test_power_family_condition_pair():
    spec = make_power_family(1.0, 1.0, 1.0, 1.0, lm_drift(0.5), 0.5)
    m, s = power_family_check(spec, X2, 0.1, 0.1)
    assert (m.verdict, s.verdict) == (SATISFIED, SATISFIED)
    spec = make_power_family(1.0, 1.0, 1.0, 1.0, power_family_drift("exp", 0.5, 1.0, 1.0, 1.0, K=1.0, a=1.0), 0.5)
    m, s = power_family_check(spec, PhiFunction(power(1.0, 1.5)), 0.1, 0.1)
    assert (m.verdict, s.verdict) == (SATISFIED, SATISFIED)


@pytest.mark.parametrize("rho,gamma,delta", [(0.0, 1.0, 1.0), (-0.3, 1.0, 1.0), (0.5, 0.5, 0.5)])
def test_power_family_preconditions(rho, gamma, delta):
    spec = make_power_family(1.0, 1.0, gamma, delta, zero(), rho)
    with pytest.raises(ValueError, match="rho > 0, gamma \\+ delta > 1"):
        power_family_check(spec, X2, 0.1, 0.1)
    with pytest.raises(ValueError):
        power_family_check(lm_model(), X2, 0.1, 0.1)


@pytest.mark.parametrize(
    "eps,expected",
    [(0.1, 10.0), (0.5, 2.0), (1.0, 1.0)],
)
def test_phi_integrability_closed_forms(eps, expected):
    res = phi_integrability(PhiFunction(power(1.0, 1.0 + eps)))
    assert res.status == "integrable"
    assert res.value == pytest.approx(expected, abs=1e-6 * max(1.0, expected))


def test_phi_integrability_divergent_and_nonmonotone():
    assert phi_integrability(PhiFunction(power(1.0, 1.0))).status == "divergent"
    assert phi_integrability(PhiFunction(constant(2.0) + sin_term(1.0))).status == "inconclusive"


@settings(max_examples=25, deadline=None)
@given(p=st.floats(1.2, 4.0))
def test_phi_integrability_matches_antiderivative(p):
    res = phi_integrability(PhiFunction(power(1.0, p)))
    assert res.status == "integrable"
    assert res.value == pytest.approx(1.0 / (p - 1.0), rel=1e-6)


@pytest.mark.parametrize("k", [1.0, 2.0, 3.0])
@pytest.mark.parametrize("rho", [0.25, 0.5, 0.9])
def test_feller_lm_family_does_not_explode(k, rho):
    res = feller_scale_classify(lm_model(rho, k))
    assert res.classification == NO_EXPLOSION
    assert res.p_at_upper.divergent and res.p_at_lower.divergent


def test_feller_whole_line_constant_diffusion():
    res = feller_scale_classify(basic_model(constant(1.0), zero(), 0.0), c=0.0, lower=-math.inf)
    assert res.classification == NO_EXPLOSION


def test_feller_possible_explosion_at_zero():
    # p(x) = 1 - 1/x for mu = x^2, b = 0: finite at 0+, divergent at +inf
    res = feller_scale_classify(basic_model(power(1.0, 2.0), zero(), 0.0))
    assert res.classification == POSSIBLE_EXPLOSION
    assert res.p_at_upper.divergent
    assert not res.p_at_lower.divergent
    assert res.p_at_lower.value == pytest.approx(-1.0, rel=1e-6)


def test_feller_classification_invariant():
    for spec in (lm_model(0.5, 1.0), basic_model(power(1.0, 2.0), zero(), 0.0)):
        r = feller_scale_classify(spec)
        assert (r.classification == NO_EXPLOSION) == (r.p_at_upper.divergent and r.p_at_lower.divergent)


def test_feller_singularity_inside_domain():
    with pytest.raises(FellerSingularityError):
        feller_scale_classify(basic_model(power(1.0, 1.0), zero(), 0.0), c=1.0, lower=-math.inf)


def test_tail_trend_power_law_extrapolation_is_exact():
    xs = geometric_grid(1.0, 1e6)
    tr = tail_trend(xs, 0.1 - xs**-0.3)
    assert tr.limit == pytest.approx(0.1, abs=1e-12)
    assert tail_trend(xs, np.log(xs)).limit == math.inf


def test_verdict_serialises():
    d = lm_martingale_check(lm_model()).to_dict()
    assert d["verdict"] == SATISFIED and len(d["grid"]) == len(d["values"])
