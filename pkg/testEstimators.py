import math

import numpy as np
import pytest

from distributions import RandomStream
from errors import DegenerateEstimateError, DomainError
from estimators import (
    BETWEEN_RUNS,
    NO_HITS,
    WITHIN_RUN,
    ak_estimate,
    cmc_estimate,
    efficiency_report,
    make_report,
    mcis_estimate,
    relative_time_variance_product,
)
from samplers import MarginalTable, ProblemSpec, build_marginal_table, gibbs_fs


def _within(report, expected, bands=4.0):
    se = report.re * report.ellHat
    return abs(report.ellHat - expected) <= bands * se


def test_cmc_certain_event():
    report = cmc_estimate(ProblemSpec(3, 0.5, 0.0), 1000, RandomStream(1))
    assert report.ellHat == 1.0
    assert report.re == 0.0
    assert WITHIN_RUN in report.flags


def test_cmc_one_dimension_analytic():
    report = cmc_estimate(ProblemSpec(1, 1.0, 1.0), 200_000, RandomStream(2))
    assert _within(report, math.exp(-1.0))
    assert report.rv == pytest.approx(report.re ** 2)


def test_cmc_without_hits_is_flagged():
    report = cmc_estimate(ProblemSpec(2, 1.0, 200.0), 1000, RandomStream(3))
    assert report.ellHat == 0.0
    assert math.isnan(report.re)
    assert NO_HITS in report.flags


def test_cmc_rejects_empty_budget():
    with pytest.raises(DomainError):
        cmc_estimate(ProblemSpec(1, 1.0, 1.0), 0, RandomStream(0))


@pytest.mark.parametrize("alpha, gamma", [(0.5, 4.0), (1.0, 3.0), (0.2, 10.0)])
def test_ak_exact_in_one_dimension(alpha, gamma):
    report = ak_estimate(ProblemSpec(1, alpha, gamma), 10, RandomStream(4))
    assert report.ellHat == pytest.approx(math.exp(-gamma ** alpha), rel=1e-14)
    assert report.re == 0.0


def test_ak_matches_erlang_tail():
    report = ak_estimate(ProblemSpec(2, 1.0, 5.0), 100_000, RandomStream(5))
    assert _within(report, math.exp(-5.0) * 6.0)


def test_mcis_is_exact_in_one_dimension():
    spec = ProblemSpec(1, 0.7, 6.0)
    table = build_marginal_table(gibbs_fs(spec, 200, RandomStream(6)), 1.0, spec=spec)
    report = mcis_estimate(spec, table, 500, RandomStream(7))
    assert report.ellHat == pytest.approx(math.exp(-6.0 ** 0.7), rel=1e-12)


def test_mcis_with_zero_constants_is_crude_monte_carlo():
    spec = ProblemSpec(2, 1.0, 2.0)
    table = MarginalTable(np.zeros((2, 1)), np.array([[1.0], [2.0]]), 1, 1.0, 2, True)
    report = mcis_estimate(spec, table, 100_000, RandomStream(8))
    assert _within(report, math.exp(-2.0) * 3.0)


def test_mcis_invariant_to_table_scaling():
    spec = ProblemSpec(4, 0.8, 12.0)
    table = build_marginal_table(gibbs_fs(spec, 400, RandomStream(9)), 0.5, True, RandomStream(10))
    scaled = MarginalTable(table.sortedConstants, 2.0 * table.cumulativeWeights, 2 * table.sampleCount, table.alpha, table.dimension, table.pooled)
    a = mcis_estimate(spec, table, 2000, RandomStream(11))
    b = mcis_estimate(spec, scaled, 2000, RandomStream(11))
    assert a.ellHat == b.ellHat
    assert a.re == b.re


def test_mcis_zero_ratio_at_a_hit_raises():
    spec = ProblemSpec(1, 1.0, 0.0)
    table = MarginalTable(np.zeros((1, 1)), np.zeros((1, 1)), 1, 1.0, 1, True)
    with pytest.raises(DegenerateEstimateError):
        mcis_estimate(spec, table, 10, RandomStream(12))


@pytest.mark.slow
def test_estimators_agree_off_the_rare_regime():
    spec = ProblemSpec(10, 0.6, 20.0)
    cmc = cmc_estimate(spec, 400_000, RandomStream(13))
    ak = ak_estimate(spec, 400_000, RandomStream(14))
    table = build_marginal_table(gibbs_fs(spec, 20_000, RandomStream(15)), 0.5, True, RandomStream(16))
    mcis = mcis_estimate(spec, table, 100_000, RandomStream(17))
    reports = [cmc, ak, mcis]
    for i in range(3):
        for j in range(i + 1, 3):
            a, b = reports[i], reports[j]
            se = math.hypot(a.re * a.ellHat, b.re * b.ellHat)
            assert abs(a.ellHat - b.ellHat) < 4.0 * se


@pytest.mark.slow
def test_ak_relative_error_vanishes_with_gamma():
    low = ak_estimate(ProblemSpec(10, 0.2, 1e4), 40_000, RandomStream(18))
    high = ak_estimate(ProblemSpec(10, 0.2, 1e6), 40_000, RandomStream(18))
    assert high.re < low.re


def test_efficiency_report_constant_replicates():
    report = efficiency_report([1.0, 1.0, 1.0], 2.0)
    assert report.re == 0.0
    assert report.rtvp == 0.0
    assert report.cpuSeconds == 2.0
    assert BETWEEN_RUNS in report.flags


def test_efficiency_report_formula():
    spread = 0.02 * math.sqrt(99.0 / 100.0)
    replicates = [0.1 + spread] * 50 + [0.1 - spread] * 50
    report = efficiency_report(replicates, 1.0)
    assert report.ellHat == pytest.approx(0.1)
    # sd 0.02 over mean 0.1, averaged over 100 runs
    assert report.re == pytest.approx(0.02)
    assert report.rtvp == pytest.approx(100 * 1.0 * 0.02 ** 2)
    assert report.reps == 100


def test_efficiency_report_shrinks_with_more_runs():
    few = efficiency_report([0.09, 0.11] * 2, 1.0)
    many = efficiency_report([0.09, 0.11] * 8, 1.0)
    perRunFew = 0.1 * math.sqrt(4.0 / 3.0)
    perRunMany = 0.1 * math.sqrt(16.0 / 15.0)
    assert few.re == pytest.approx(perRunFew / 2.0)
    assert many.re == pytest.approx(perRunMany / 4.0)
    # rtvp is per-run spread squared times per-run seconds, whatever K is
    assert few.rtvp == pytest.approx(perRunFew ** 2)
    assert many.rtvp == pytest.approx(perRunMany ** 2)
    assert few.perRunRe == pytest.approx(perRunFew)


def test_efficiency_report_errors():
    with pytest.raises(DomainError):
        efficiency_report([0.5], 1.0)
    with pytest.raises(DegenerateEstimateError):
        efficiency_report([0.0, 0.0], 1.0)


def test_relative_time_variance_product():
    assert relative_time_variance_product(4.0, 0.1, 2.0) == pytest.approx(800.0)
    with pytest.raises(DegenerateEstimateError):
        relative_time_variance_product(1.0, 0.0, 1.0)


def test_make_report_keeps_invariants():
    report = make_report(0.25, 0.1, 3.0, 1000)
    assert report.rv == pytest.approx(0.01)
    assert report.rtvp == pytest.approx(0.03)
    assert report.withFlags("x", "x").flags == ("x",)
