import math

import numpy as np
import pytest
import scipy.stats

from distributions import (
    RandomStream,
    WeibullParams,
    exp_quantile,
    exp_sample,
    log_weibull_tail,
    truncated_weibull_quantile,
    truncated_weibull_sample,
    weibull_cdf_interval,
    weibull_quantile,
    weibull_sample,
    weibull_tail,
)
from errors import DomainError


def test_weibull_tail_values():
    assert weibull_tail(1.0, 1.0) == pytest.approx(math.exp(-1.0), rel=1e-15)
    assert weibull_tail(0.5, 4.0) == pytest.approx(math.exp(-2.0), rel=1e-15)
    assert weibull_tail(0.3, 0.0) == 1.0


def test_weibull_tail_is_non_increasing():
    grid = np.linspace(0.0, 50.0, 501)
    values = weibull_tail(0.7, grid)
    assert np.all(np.diff(values) <= 0.0)


def test_log_tail_survives_underflow():
    assert log_weibull_tail(0.5, 1e6) == pytest.approx(-1000.0)
    assert weibull_tail(0.5, 1e6) == 0.0


@pytest.mark.parametrize("alpha, x", [(0.0, 1.0), (-1.0, 1.0), (1.0, -0.5), (1.0, math.nan)])
def test_tail_domain_errors(alpha, x):
    with pytest.raises(DomainError):
        weibull_tail(alpha, x)


def test_quantile_inverts_tail():
    assert weibull_quantile(1.0, math.exp(-1.0)) == pytest.approx(1.0)
    assert weibull_quantile(2.0, 1.0) == 0.0
    u = np.array([0.9, 0.5, 1e-10])
    x = weibull_quantile(0.4, u)
    np.testing.assert_allclose(weibull_tail(0.4, x), u, rtol=1e-12)


def test_truncated_quantile_endpoints():
    assert truncated_weibull_quantile(0.8, 2.0, 5.0, 0.0) == pytest.approx(2.0)
    top = truncated_weibull_quantile(0.8, 2.0, 5.0, 1.0 - 1e-17)
    assert 2.0 <= top < 5.0
    # infinite upper bound: (a^alpha - log u)^(1/alpha)
    assert truncated_weibull_quantile(1.0, 3.0, math.inf, math.exp(-1.0)) == pytest.approx(4.0)


def test_truncated_quantile_far_in_the_tail():
    # exp(-a^alpha) underflows here, the difference of exponents does not
    x = truncated_weibull_quantile(1.0, 1000.0, 1001.0, 0.5)
    assert 1000.0 <= x < 1001.0
    assert x == pytest.approx(1000.0 - math.log1p(-0.5 * -math.expm1(-1.0)))


def test_truncated_interval_errors():
    with pytest.raises(DomainError):
        truncated_weibull_quantile(1.0, 2.0, 2.0, 0.5)
    with pytest.raises(DomainError):
        truncated_weibull_quantile(1.0, -1.0, 2.0, 0.5)


@pytest.mark.parametrize("alpha, a, b", [(0.5, 1.0, 4.0), (1.7, 0.0, 1.5), (0.2, 10.0, math.inf)])
def test_truncated_sample_fits_its_law(alpha, a, b):
    rng = RandomStream(11, 3)
    x = truncated_weibull_sample(alpha, a, b, rng, size=5000)
    assert np.all(x >= a) and np.all(x < b)
    result = scipy.stats.kstest(x, lambda v: weibull_cdf_interval(alpha, a, b, v))
    assert result.pvalue > 0.01


def test_weibull_sample_fits_its_law():
    x = weibull_sample(0.6, RandomStream(5), size=5000)
    result = scipy.stats.kstest(x, scipy.stats.weibull_min(0.6).cdf)
    assert result.pvalue > 0.01


def test_exp_helpers():
    assert exp_quantile(1.0) == 0.0
    assert np.all(exp_sample(RandomStream(1), 100) >= 0.0)


def test_streams_are_reproducible_and_independent():
    a = RandomStream(42, 7).uniform(10)
    b = RandomStream(42, 7).uniform(10)
    c = RandomStream(42, 8).uniform(10)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.all((a > 0.0) & (a <= 1.0))


def test_spawn_and_derive_are_stable():
    root = RandomStream(3)
    np.testing.assert_array_equal(root.spawn(2).normal(5), RandomStream(3).spawn(2).normal(5))
    np.testing.assert_array_equal(root.derive("ak|0.5|10.0").uniform(4), RandomStream(3).derive("ak|0.5|10.0").uniform(4))
    assert root.spawn(1).path == (0, 1)
    assert not np.array_equal(root.derive("x").uniform(4), root.derive("y").uniform(4))


def test_permutations_rows():
    perms = RandomStream(9).permutations(50, 6)
    assert perms.shape == (50, 6)
    assert np.all(np.sort(perms, axis=1) == np.arange(6))


def test_bad_seed_and_shape():
    with pytest.raises(DomainError):
        RandomStream(-1)
    with pytest.raises(DomainError):
        WeibullParams(0.0)
    assert WeibullParams(0.5).heavyTailed
    assert not WeibullParams(1.5).heavyTailed
