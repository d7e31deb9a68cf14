import math

import numpy as np
import pytest

from distributions import RandomStream
from errors import DomainError, InfeasibleError
from lowerBound import VariationalParams
from samplers import (
    ChainOptions,
    MarginalTable,
    ProblemSpec,
    SampleBlock,
    build_marginal_table,
    exceedance_count,
    gibbs_f3,
    gibbs_fs,
    gibbs_lower_bound_density,
    gibbs_scheme_b,
    marginal_ratio,
    order_statistic_map,
    sample_f1,
    sample_f2,
    support_f3,
    support_fs,
)


def _table(constants, alpha, d, sampleCount=None, pooled=True):
    constants = np.sort(np.asarray(constants, dtype=float), axis=0).reshape(len(constants), -1)
    weights = np.cumsum(np.exp(np.power(constants, alpha)), axis=0)
    m = sampleCount if sampleCount is not None else constants.shape[0] // (d if pooled else 1)
    return MarginalTable(constants, weights, m, alpha, d, pooled)


@pytest.mark.parametrize("d, alpha, gamma", [(0, 1.0, 1.0), (2, 0.0, 1.0), (2, 1.0, -1.0), (1.5, 1.0, 1.0)])
def test_problem_spec_validation(d, alpha, gamma):
    with pytest.raises(DomainError):
        ProblemSpec(d, alpha, gamma)


def test_sample_block_is_read_only():
    block = SampleBlock(np.ones((3, 2)))
    assert len(block) == 3
    with pytest.raises(ValueError):
        block.values[0, 0] = 2.0


def test_gibbs_fs_support_and_shape():
    spec = ProblemSpec(10, 0.9, 30.0)
    block = gibbs_fs(spec, 2000, RandomStream(1))
    assert block.values.shape == (2000, 10)
    assert np.all(block.values.sum(axis=1) >= spec.gamma)
    assert np.all(support_fs(block.values, spec.gamma))


def test_gibbs_fs_burn_in_and_thinning():
    spec = ProblemSpec(3, 0.5, 20.0)
    block = gibbs_fs(spec, 100, RandomStream(2), ChainOptions(burnIn=50, thin=3))
    assert len(block) == 100
    assert block.burnIn == 50 and block.thin == 3


def test_gibbs_fs_rejects_infeasible_start():
    spec = ProblemSpec(2, 1.0, 10.0)
    with pytest.raises(InfeasibleError):
        gibbs_fs(spec, 10, RandomStream(0), ChainOptions(start=(1.0, 1.0)))


def test_gibbs_fs_is_reproducible():
    spec = ProblemSpec(4, 0.7, 15.0)
    a = gibbs_fs(spec, 200, RandomStream(8, 1)).values
    b = gibbs_fs(spec, 200, RandomStream(8, 1)).values
    np.testing.assert_array_equal(a, b)


def test_gibbs_fs_stationary_mean_near_unconditioned():
    spec = ProblemSpec(2, 1.0, 0.01)
    x = gibbs_fs(spec, 20000, RandomStream(17), ChainOptions(permute=False)).values[:, 0]
    g = spec.gamma
    tail = math.exp(-g) * (1.0 + g)
    below = (1.0 - math.exp(-g) * (1.0 + g)) - math.exp(-g) * g * g / 2.0
    expected = (1.0 - below) / tail
    se = x.std(ddof=1) / math.sqrt(x.size)
    assert abs(x.mean() - expected) < 4.0 * se


def test_gibbs_f3_support():
    spec = ProblemSpec(5, 0.5, 25.0)
    block = gibbs_f3(spec, 1000, RandomStream(3))
    assert np.all(support_f3(block.values, spec.gamma))
    assert np.all(block.values.max(axis=1) < spec.gamma)


def test_gibbs_f3_needs_two_dimensions():
    with pytest.raises(InfeasibleError):
        gibbs_f3(ProblemSpec(1, 0.5, 3.0), 10, RandomStream(0))


def test_sample_f1_has_an_exceedance_per_row():
    spec = ProblemSpec(6, 0.4, 50.0)
    block = sample_f1(spec, 3000, RandomStream(4))
    assert np.all(exceedance_count(block.values, spec.gamma) >= 1)


def test_marginal_table_shape_when_pooled():
    spec = ProblemSpec(10, 0.9, 30.0)
    chain = gibbs_fs(spec, 400, RandomStream(5))
    table = build_marginal_table(chain, 0.5, True, RandomStream(6))
    assert table.sortedConstants.shape == (2000, 1)
    assert table.sampleCount == 200
    assert np.all(np.diff(table.sortedConstants[:, 0]) >= 0.0)
    separate = build_marginal_table(chain, 0.5, False, RandomStream(6))
    assert separate.sortedConstants.shape == (200, 10)


def test_marginal_table_needs_a_stream_to_subsample():
    spec = ProblemSpec(3, 0.9, 5.0)
    chain = gibbs_fs(spec, 10, RandomStream(5))
    with pytest.raises(DomainError):
        build_marginal_table(chain, 0.5)


def test_marginal_ratio_all_zero_constants():
    table = _table(np.zeros((6, 1)), 0.7, 3, sampleCount=2)
    assert marginal_ratio(table, np.array([0.0, 1.0, 5.0])) == pytest.approx(1.0)


def test_marginal_ratio_two_constants():
    alpha = 0.5
    table = _table([[0.0], [2.0]], alpha, 1, sampleCount=2)
    assert marginal_ratio(table, np.array([1.0])) == pytest.approx(0.5)
    # ties count as inside
    expected = (1.0 + math.exp(2.0 ** alpha)) / 2.0
    assert marginal_ratio(table, np.array([2.0])) == pytest.approx(expected)


def test_marginal_ratio_zero_below_every_constant():
    table = _table([[1.0], [2.0]], 1.0, 1, sampleCount=2)
    assert marginal_ratio(table, np.array([0.5])) == 0.0


def test_marginal_ratio_matches_direct_sum():
    spec = ProblemSpec(4, 0.6, 12.0)
    chain = gibbs_fs(spec, 300, RandomStream(12))
    table = build_marginal_table(chain, 1.0, True, spec=spec)
    points = sample_f2(table, 100, RandomStream(13)).values
    constants = table.sortedConstants[:, 0]
    direct = np.array([
        np.prod([np.sum(np.exp(constants ** spec.alpha) * (x_i >= constants)) / table.normalizer for x_i in x])
        for x in points
    ])
    np.testing.assert_allclose(marginal_ratio(table, points), direct, rtol=1e-12)


def test_sample_f2_single_constant():
    gamma = 7.0
    table = _table([[gamma]], 0.8, 5, sampleCount=1)
    block = sample_f2(table, 500, RandomStream(21))
    assert np.all(block.values >= gamma)
    zero = _table([[0.0]], 0.8, 5, sampleCount=1)
    assert np.all(sample_f2(zero, 500, RandomStream(21)).values >= 0.0)


def test_gibbs_scheme_b_support_and_order():
    spec = ProblemSpec(10, 0.5, 100.0)
    y = gibbs_scheme_b(spec, 1000, RandomStream(31)).values
    assert np.all(np.power(y, 1.0 / spec.alpha).sum(axis=1) >= spec.gamma)
    assert np.all(np.diff(y, axis=1) >= 0.0)


def test_gibbs_scheme_b_matches_gibbs_fs_at_alpha_one():
    spec = ProblemSpec(10, 1.0, 30.0)
    a = gibbs_scheme_b(spec, 5000, RandomStream(41)).values.sum(axis=1)
    b = gibbs_fs(spec, 5000, RandomStream(42)).values.sum(axis=1)
    se = math.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
    # chains are autocorrelated; a loose band still separates a wrong conditional
    assert abs(a.mean() - b.mean()) < 6.0 * se


def test_order_statistic_map():
    np.testing.assert_allclose(order_statistic_map(np.array([1.0, 1.0])), [0.5, 1.5])
    z = RandomStream(1).uniform((20, 4))
    assert np.all(np.diff(order_statistic_map(z), axis=1) >= 0.0)


def test_lower_bound_density_support():
    alpha, gamma = 0.5, 40.0
    params = VariationalParams([1.0, 2.0, 3.0, 4.0])
    beta = params.coefficients(alpha)
    gammaStar = params.gamma_star(alpha, gamma)
    rows = gibbs_lower_bound_density(beta, gammaStar, 2000, RandomStream(51)).values
    assert np.all(rows @ params.linearWeights(alpha) >= gammaStar * (1.0 - 1e-12))
    assert np.all(np.diff(rows, axis=1) >= 0.0)


def test_lower_bound_density_one_dimension():
    rows = gibbs_lower_bound_density([2.0], 6.0, 100, RandomStream(52)).values
    assert np.all(rows[:, 0] >= 3.0)


def test_lower_bound_density_rejects_bad_input():
    with pytest.raises(DomainError):
        gibbs_lower_bound_density([1.0, 0.0], 1.0, 10, RandomStream(0))
    with pytest.raises(DomainError):
        gibbs_lower_bound_density([1.0], 0.0, 10, RandomStream(0))
