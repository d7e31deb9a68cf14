import math

import mpmath
import numpy as np
import pytest
import scipy.stats

from distributions import RandomStream
from errors import DegenerateEstimateError, DomainError
from estimators import ak_estimate, cmc_estimate
from lowerBound import (
    CeOptions,
    ErlangPhase,
    SchemeBOptions,
    VariationalParams,
    bound_value,
    ce_maximize_bound,
    erlang_tail,
    log_bound_value,
    log_erlang_tail,
    s_lower,
    scheme_b_closed_form,
    scheme_b_run,
)
from samplers import ProblemSpec

FAST_CE = CeOptions(population=60, maxIter=40)


def _hypoexponentialTail(rates, t):
    with mpmath.workdps(60):
        r = [mpmath.mpf(float(v)) for v in rates]
        total = mpmath.mpf(0)
        for j, rj in enumerate(r):
            coef = mpmath.mpf(1)
            for k, rk in enumerate(r):
                if k != j:
                    coef *= rk / (rk - rj)
            total += coef * mpmath.exp(-rj * t)
        return float(total)


def test_erlang_tail_examples():
    assert erlang_tail(ErlangPhase((1.0,), 0.0)) == 1.0
    assert erlang_tail(ErlangPhase((1.0, 1.0), 5.0)) == pytest.approx(math.exp(-5.0) * 6.0, rel=1e-12)
    assert erlang_tail(ErlangPhase((1.0, 2.0), 1.0)) == pytest.approx(2.0 * math.exp(-1.0) - math.exp(-2.0), rel=1e-12)


def test_erlang_tail_is_monotone_and_starts_at_one():
    phase = (0.5, 1.5, 3.0, 3.0)
    values = [erlang_tail(ErlangPhase(phase, t)) for t in np.linspace(0.0, 30.0, 10)]
    assert values[0] == 1.0
    assert all(b <= a for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("seed", range(10))
def test_erlang_tail_matches_partial_fractions(seed):
    gen = np.random.default_rng(seed)
    d = int(gen.integers(2, 7))
    rates = np.sort(gen.uniform(0.3, 4.0, size=d))
    rates += 0.05 * np.arange(d)
    t = float(gen.uniform(0.2, 3.0))
    expected = _hypoexponentialTail(rates, t)
    assert erlang_tail(ErlangPhase(tuple(rates), t)) == pytest.approx(expected, rel=1e-10)
    assert math.exp(log_erlang_tail(ErlangPhase(tuple(rates), t))) == pytest.approx(expected, rel=1e-10)


def test_log_tail_far_below_double_precision():
    assert log_erlang_tail(ErlangPhase((1.0, 2.0), 800.0)) == pytest.approx(math.log(2.0) - 800.0, rel=1e-12)
    assert log_erlang_tail(ErlangPhase((1.0, 1.0), 1000.0)) == pytest.approx(-1000.0 + math.log(1001.0), rel=1e-12)
    assert log_erlang_tail(ErlangPhase((3.0,), 10.0)) == -30.0


def test_erlang_tail_matches_simulation():
    rates = np.array([0.5, 1.0, 4.0])
    t = 6.0
    gen = np.random.default_rng(7)
    draws = gen.exponential(size=(200_000, 3)) / rates
    hits = (draws.sum(axis=1) >= t).astype(float)
    se = hits.std(ddof=1) / math.sqrt(hits.size)
    assert abs(hits.mean() - erlang_tail(ErlangPhase(tuple(rates), t))) < 4.0 * se


def test_phase_validation():
    with pytest.raises(DomainError):
        ErlangPhase((1.0, -1.0), 1.0)
    with pytest.raises(DomainError):
        ErlangPhase((1.0,), -1.0)
    with pytest.raises(DomainError):
        VariationalParams([1.0, 0.0])


def test_coefficients_follow_the_tail_average():
    params = VariationalParams([1.0, 2.0, 4.0])
    c = params.linearWeights(0.5)
    np.testing.assert_allclose(c, [1.0, 2.0, 4.0])
    np.testing.assert_allclose(params.coefficients(0.5), [7.0 / 3.0, 3.0, 4.0])
    assert params.gamma_star(0.5, 10.0) == pytest.approx(0.5 * 10.0 + 0.5 * 21.0)


def test_s_lower_is_tangent_and_below():
    params = VariationalParams([0.5, 1.0, 2.0, 3.0, 0.2])
    alpha = 0.5
    assert s_lower(params.lambdas, params, alpha) == pytest.approx(np.sum(params.lambdas ** (1.0 / alpha)), rel=1e-12)
    y = np.random.default_rng(1).exponential(size=(1000, 5)) * 3.0
    assert np.all(s_lower(y, params, alpha) <= np.sum(y ** (1.0 / alpha), axis=1) + 1e-9)


@pytest.mark.parametrize("alpha", [0.1, 0.3, 0.5, 0.7, 0.9])
def test_s_lower_never_exceeds_the_sum(alpha):
    gen = np.random.default_rng(int(alpha * 10))
    for _ in range(200):
        params = VariationalParams(gen.uniform(0.1, 3.0, size=4))
        y = gen.uniform(0.0, 3.0, size=(50, 4))
        assert np.all(s_lower(y, params, alpha) <= np.sum(y ** (1.0 / alpha), axis=1) * (1 + 1e-12) + 1e-12)


def test_s_lower_is_exact_at_alpha_one():
    params = VariationalParams([3.0, 0.1])
    y = np.array([[1.0, 2.0], [0.0, 5.0]])
    np.testing.assert_allclose(s_lower(y, params, 1.0), y.sum(axis=1))


def test_bound_at_alpha_one_is_the_erlang_tail():
    spec = ProblemSpec(4, 1.0, 6.0)
    expected = scipy.stats.gamma(4).sf(6.0)
    for lambdas in ([1.0, 1.0, 1.0, 1.0], [0.2, 5.0, 1.0, 3.0]):
        assert bound_value(VariationalParams(lambdas), spec) == pytest.approx(expected, rel=1e-10)


def test_bound_matches_simulation_of_the_linearized_event():
    spec = ProblemSpec(3, 0.5, 8.0)
    params = VariationalParams([0.8, 1.5, 2.5])
    gen = np.random.default_rng(3)
    y = np.sort(gen.exponential(size=(200_000, 3)), axis=1)
    hits = (y @ params.linearWeights(spec.alpha) >= params.gamma_star(spec.alpha, spec.gamma)).astype(float)
    se = hits.std(ddof=1) / math.sqrt(hits.size)
    assert abs(hits.mean() - bound_value(params, spec)) < 4.0 * se


def test_bound_does_not_exceed_the_probability():
    spec = ProblemSpec(3, 0.5, 8.0)
    report = cmc_estimate(spec, 200_000, RandomStream(4))
    for lambdas in ([1.0, 1.0, 1.0], [0.3, 0.6, 2.8], [2.0, 2.0, 0.1]):
        assert bound_value(VariationalParams(lambdas), spec) <= report.ellHat + 4.0 * report.re * report.ellHat


def test_log_bound_agrees_with_the_bound():
    spec = ProblemSpec(3, 0.5, 8.0)
    params = VariationalParams([0.3, 0.6, 2.8])
    assert math.exp(log_bound_value(params, spec)) == pytest.approx(bound_value(params, spec), rel=1e-9)


def test_ce_at_alpha_one_returns_the_erlang_tail():
    spec = ProblemSpec(5, 1.0, 12.0)
    _, ellLower = ce_maximize_bound(spec, RandomStream(5), FAST_CE)
    assert ellLower == pytest.approx(scipy.stats.gamma(5).sf(12.0), rel=1e-9)


def test_ce_beats_the_symmetric_start():
    spec = ProblemSpec(4, 0.5, 20.0)
    params, ellLower = ce_maximize_bound(spec, RandomStream(6), FAST_CE)
    symmetric = VariationalParams(np.full(4, (spec.gamma / spec.d) ** spec.alpha))
    assert ellLower >= bound_value(symmetric, spec) * (1.0 - 1e-9)
    assert ellLower == pytest.approx(bound_value(params, spec))


def test_ce_rejects_alpha_above_one():
    with pytest.raises(DomainError):
        ce_maximize_bound(ProblemSpec(2, 1.5, 3.0), RandomStream(0), FAST_CE)


def test_closed_form():
    assert scheme_b_closed_form(150, 100, 100, 1e-4) == pytest.approx(2e-4)
    assert scheme_b_closed_form(200, 100, 100, 1e-4) == pytest.approx(1e-4)
    with pytest.raises(DegenerateEstimateError):
        scheme_b_closed_form(100, 100, 100, 1e-4)
    with pytest.raises(DomainError):
        scheme_b_closed_form(201, 100, 100, 1e-4)


def test_scheme_b_orders_and_estimates():
    spec = ProblemSpec(3, 0.5, 12.0)
    solution, report = scheme_b_run(spec, 3000, RandomStream(7), SchemeBOptions(ce=FAST_CE))
    assert solution.ellHat[0] <= solution.ellHat[1]
    assert report.ellHat == solution.ellHat[1]
    reference = ak_estimate(spec, 200_000, RandomStream(8))
    assert report.ellHat == pytest.approx(reference.ellHat, rel=0.15)


def test_scheme_b_with_real_reference_draws():
    spec = ProblemSpec(3, 0.5, 12.0)
    solution, _ = scheme_b_run(spec, (1000, 2000), RandomStream(9), SchemeBOptions(ce=FAST_CE, drawReference=True))
    assert solution.ellHat[0] <= solution.ellHat[1]


@pytest.mark.slow
def test_ce_bound_reproduces_reference_value():
    spec = ProblemSpec(10, 0.9, 30.0)
    _, ellLower = ce_maximize_bound(spec, RandomStream(10))
    assert 1.1e-4 <= ellLower <= 1.35e-4


@pytest.mark.slow
def test_scheme_b_reproduces_reference_value():
    spec = ProblemSpec(10, 0.9, 30.0)
    values = []
    for k in range(30):
        solution, report = scheme_b_run(spec, 20_000, RandomStream(11).spawn(k))
        assert solution.ellHat[0] <= solution.ellHat[1]
        values.append(report.ellHat)
    assert np.mean(values) == pytest.approx(1.33e-4, rel=0.03)


@pytest.mark.slow
def test_ce_bound_at_a_far_tail_cell():
    spec = ProblemSpec(10, 0.1, 1e13)
    params, ellLower = ce_maximize_bound(spec, RandomStream(12))
    assert ellLower == pytest.approx(2.16e-8, rel=0.02)
    assert math.exp(log_bound_value(params, spec)) == pytest.approx(ellLower, rel=1e-9)
