import functools
import math

import numpy as np
import pytest

from distributions import RandomStream
from elmCore import (
    NEWTON_MAX_ITER,
    PRECISION_FLOOR,
    RE_UNAVAILABLE,
    DensityComponent,
    DensitySequence,
    LinearConstraints,
    SchemeAOptions,
    WeightMatrix,
    build_weight_matrix,
    check_connectivity,
    constrained_minimize,
    fixed_reference_minimize,
    gradient_d,
    hessian_d,
    jacobi_solve,
    nominal_run,
    objective_d,
    recover_ell,
    scheme_a_run,
    scheme_a_sequence,
)
from estimators import ak_estimate, efficiency_report, mcis_estimate
from errors import DisconnectedSupportError, DomainError, InfeasibleError
from lowerBound import ErlangPhase, erlang_tail
from samplers import MarginalTable, ProblemSpec, SampleBlock, build_marginal_table, gibbs_fs


def _randomMatrix(seed, s=4, n=60, density=0.7):
    gen = np.random.default_rng(seed)
    entries = gen.exponential(size=(s, n)) * (gen.random((s, n)) < density)
    sources = np.repeat(np.arange(s), n // s)
    entries[sources, np.arange(n)] += 0.5
    lambdas = np.bincount(sources, minlength=s) / n
    return WeightMatrix(entries, columnSources=sources), lambdas


def test_objective_two_identical_densities():
    w = WeightMatrix(np.ones((2, 5)))
    assert objective_d(w, [0.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2.0))
    np.testing.assert_allclose(gradient_d(w, [0.0, 0.0], [0.5, 0.5]), [0.0, 0.0], atol=1e-15)


def test_objective_single_density_is_flat():
    w = WeightMatrix(np.array([[0.5, 2.0, 3.0]]))
    assert objective_d(w, [0.0], [1.0]) == pytest.approx(objective_d(w, [4.2], [1.0]))
    assert gradient_d(w, [1.3], [1.0])[0] == pytest.approx(0.0, abs=1e-15)


def test_translation_invariance():
    w, lambdas = _randomMatrix(1)
    gen = np.random.default_rng(2)
    z = gen.normal(size=w.s)
    for c in gen.uniform(-5.0, 5.0, size=5):
        assert objective_d(w, z + c, lambdas) == pytest.approx(objective_d(w, z, lambdas), abs=1e-12)
    assert abs(gradient_d(w, z, lambdas).sum()) < 1e-12
    np.testing.assert_allclose(hessian_d(w, z, lambdas) @ np.ones(w.s), 0.0, atol=1e-12)


def test_gradient_and_hessian_match_finite_differences():
    w, lambdas = _randomMatrix(3)
    z = np.random.default_rng(4).normal(size=w.s)
    h = 1e-6
    grad = gradient_d(w, z, lambdas)
    hess = hessian_d(w, z, lambdas)
    for k in range(w.s):
        step = np.zeros(w.s)
        step[k] = h
        numeric = (objective_d(w, z + step, lambdas) - objective_d(w, z - step, lambdas)) / (2 * h)
        assert abs(numeric - grad[k]) < 1e-6
        column = (gradient_d(w, z + step, lambdas) - gradient_d(w, z - step, lambdas)) / (2 * h)
        np.testing.assert_allclose(column, hess[:, k], atol=1e-5)


def test_convexity_and_positive_semidefinite_hessian():
    w, lambdas = _randomMatrix(5)
    gen = np.random.default_rng(6)
    for _ in range(10):
        a, b = gen.normal(size=(2, w.s)) * 3.0
        theta = gen.uniform()
        mixed = objective_d(w, theta * a + (1 - theta) * b, lambdas)
        assert mixed <= theta * objective_d(w, a, lambdas) + (1 - theta) * objective_d(w, b, lambdas) + 1e-10
        assert np.linalg.eigvalsh(hessian_d(w, a, lambdas)).min() >= -1e-10


def test_huge_weights_do_not_overflow():
    w = WeightMatrix(np.array([[1e300, 1.0], [1.0, 1e-300]]))
    assert math.isfinite(objective_d(w, [500.0, -500.0], [0.5, 0.5]))


def test_zero_column_is_reported():
    w = WeightMatrix(np.array([[1.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(DisconnectedSupportError) as info:
        objective_d(w, [0.0, 0.0], [0.5, 0.5])
    assert info.value.columns == [1]


def test_weight_matrix_validation():
    with pytest.raises(DomainError):
        WeightMatrix(np.array([[-1.0, 1.0]]))
    with pytest.raises(DisconnectedSupportError):
        WeightMatrix(np.array([[0.0, 1.0], [1.0, 1.0]]), columnSources=[0, 1])
    with pytest.raises(DomainError):
        WeightMatrix(np.ones((2, 3)), multiplicity=[1.0, 0.0, 1.0])


def test_multiplicity_equals_repeated_columns():
    repeated = WeightMatrix(np.array([[1.0, 1.0, 1.0, 0.0], [1.0, 1.0, 1.0, 1.0]]))
    weighted = WeightMatrix(np.array([[1.0, 0.0], [1.0, 1.0]]), multiplicity=[3.0, 1.0])
    z, lambdas = np.array([0.3, -0.2]), np.array([0.25, 0.75])
    assert objective_d(weighted, z, lambdas) == pytest.approx(objective_d(repeated, z, lambdas))
    np.testing.assert_allclose(hessian_d(weighted, z, lambdas), hessian_d(repeated, z, lambdas))


def test_connectivity():
    assert check_connectivity(WeightMatrix(np.ones((1, 3)))) == (True, [[0]])
    blocks = WeightMatrix(np.array([[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]]))
    connected, components = check_connectivity(blocks)
    assert not connected
    assert components == [[0], [1]]


def test_scheme_a_rows():
    spec = ProblemSpec(2, 1.0, 3.0)
    table = MarginalTable(np.zeros((1, 1)), np.ones((1, 1)), 1, 1.0, 2, True)
    seq = scheme_a_sequence(spec, table, [1, 1, 1, 1])
    blocks = [SampleBlock([[4.0, 0.5]]), SampleBlock([[1.0, 1.0]]), SampleBlock([[2.0, 2.0]]), SampleBlock([[2.5, 1.0]])]
    w = build_weight_matrix(seq, blocks)
    np.testing.assert_allclose(w.entries[:, 0], [1.0, 0.25, 0.0, 1.0])
    np.testing.assert_allclose(w.entries[:, 2], [0.0, 0.25, 1.0, 1.0])
    np.testing.assert_allclose(w.entries[:, 3], [0.0, 0.25, 1.0, 1.0])
    assert seq.reference() == (0, pytest.approx(math.log(2.0) - 3.0))


def test_build_weight_matrix_checks_blocks():
    seq = DensitySequence([DensityComponent("f", lambda x: np.ones(len(x)), 2, 0.0)])
    with pytest.raises(DomainError):
        build_weight_matrix(seq, [SampleBlock(np.ones((3, 2)))])
    with pytest.raises(DomainError):
        build_weight_matrix(seq, [])


def test_density_sequence_needs_a_reference():
    with pytest.raises(DomainError):
        DensitySequence([DensityComponent("a", lambda x: x, 1)])
    seq = DensitySequence([DensityComponent("a", lambda x: x, 1), DensityComponent("b", lambda x: x, 3, 0.0)])
    assert seq.referenceIndex == 1
    np.testing.assert_allclose(seq.lambdas, [0.25, 0.75])


def test_recover_ell_rescales_to_the_known_constant():
    ell = recover_ell(np.array([0.1, -0.4]), [0.5, 0.5], known=(1, 0.3))
    assert ell[1] == 0.3
    assert ell[0] / ell[1] == pytest.approx(math.exp(-0.5))


def test_jacobi_identical_densities():
    w = WeightMatrix(np.ones((2, 10)), columnSources=[0] * 5 + [1] * 5)
    ell = jacobi_solve(w, [5, 5], known=(0, 1.0))
    np.testing.assert_allclose(ell, [1.0, 1.0])


def test_jacobi_rejects_disconnected_support():
    w = WeightMatrix(np.array([[1.0, 0.0], [0.0, 1.0]]), columnSources=[0, 1])
    with pytest.raises(DisconnectedSupportError):
        jacobi_solve(w, [1, 1], known=(0, 1.0))


def test_constrained_identical_densities():
    w = WeightMatrix(np.ones((2, 10)), columnSources=[0] * 5 + [1] * 5)
    solution = constrained_minimize(w, [0.5, 0.5], LinearConstraints.homogeneous([0.5, 0.5]), known=(0, 1.0))
    assert solution.converged
    np.testing.assert_allclose(solution.ellHat, [1.0, 1.0])
    np.testing.assert_allclose(solution.zHat, [0.0, 0.0], atol=1e-10)


@pytest.mark.parametrize("seed", range(20))
def test_jacobi_agrees_with_the_optimizer(seed):
    w, lambdas = _randomMatrix(100 + seed)
    counts = lambdas * w.n
    jacobi = jacobi_solve(w, counts, known=(0, 0.7))
    solution = constrained_minimize(w, lambdas, LinearConstraints.homogeneous(lambdas), known=(0, 0.7))
    np.testing.assert_allclose(solution.ellHat, jacobi, rtol=1e-6)


def test_moment_matching_at_the_solution():
    w, lambdas = _randomMatrix(7)
    solution = constrained_minimize(w, lambdas, LinearConstraints.homogeneous(lambdas), known=(0, 1.0))
    counts = lambdas * w.n
    ell = solution.ellHat
    fitted = w.entries @ (1.0 / ((counts / ell) @ w.entries))
    np.testing.assert_allclose(fitted, ell, rtol=1e-6)


def test_rounding_floor_counts_as_converged():
    w, lambdas = _randomMatrix(9)
    reference = constrained_minimize(w, lambdas, LinearConstraints.homogeneous(lambdas), known=(0, 1.0))
    # max |grad| cannot get below ~1e-16 in double precision
    tight = constrained_minimize(w, lambdas, LinearConstraints.homogeneous(lambdas), tol=1e-17, known=(0, 1.0))
    assert tight.converged
    assert set(tight.flags) <= {PRECISION_FLOOR}
    assert tight.iterations <= NEWTON_MAX_ITER
    np.testing.assert_allclose(tight.ellHat, reference.ellHat, rtol=1e-8)


def test_unreachable_tolerance_stops_instead_of_spinning():
    w, lambdas = _randomMatrix(10)
    solution = constrained_minimize(w, lambdas, LinearConstraints.homogeneous(lambdas), tol=1e-300, known=(0, 1.0), maxIter=10 ** 9)
    assert not solution.converged
    assert "stalled" in solution.flags
    assert solution.iterations <= NEWTON_MAX_ITER
    assert solution.kktResidual < 1e-12


def test_scheme_a_finishes_on_a_seed_that_sits_at_the_rounding_floor():
    spec = ProblemSpec(10, 0.1, 1e10)
    solution, report = scheme_a_run(spec, 10_000, RandomStream(25).spawn(4))
    assert solution.converged
    assert "stalled" not in solution.flags
    assert solution.iterations <= NEWTON_MAX_ITER
    assert report.ellHat == pytest.approx(4.54e-4, rel=0.05)


def test_fixed_reference_agrees_with_homogeneous_path():
    w, lambdas = _randomMatrix(8)
    a = constrained_minimize(w, lambdas, LinearConstraints.homogeneous(lambdas), known=(2, 0.05))
    b = fixed_reference_minimize(w, lambdas, known=(2, 0.05))
    np.testing.assert_allclose(a.ellHat, b.ellHat, rtol=1e-8)


def test_pinned_ratio_is_exact():
    w, lambdas = _randomMatrix(9, s=3)
    constraints = LinearConstraints.homogeneous(lambdas).pin_ratio(0, 1, math.log(5.0), lambdas)
    solution = constrained_minimize(w, lambdas, constraints, known=(0, 1.0))
    assert solution.converged
    assert solution.ellHat[0] / solution.ellHat[1] == pytest.approx(5.0, rel=1e-9)


def test_homogeneous_row_is_required():
    w, lambdas = _randomMatrix(10, s=2)
    with pytest.raises(DomainError):
        constrained_minimize(w, lambdas, LinearConstraints())


def test_inconsistent_equalities_are_infeasible():
    w, lambdas = _randomMatrix(11, s=2)
    constraints = LinearConstraints.homogeneous(lambdas).withEquality([1.0, 0.0], 1.0).withEquality([1.0, 0.0], 2.0)
    with pytest.raises(InfeasibleError):
        constrained_minimize(w, lambdas, constraints)


def test_order_constraint_slack_and_binding():
    lambdas = np.array([0.5, 0.5])
    # two kinds of columns: in both supports (60 samples) and only in the first (40 samples)
    w = WeightMatrix(np.array([[1.0, 1.0], [1.0, 0.0]]), multiplicity=[60.0, 40.0])
    free = constrained_minimize(w, lambdas, LinearConstraints.homogeneous(lambdas), known=(1, 1.0))
    assert free.ellHat[0] == pytest.approx(50.0 / (60.0 - 50.0), rel=1e-8)
    ordered = constrained_minimize(w, lambdas, LinearConstraints.homogeneous(lambdas).order(0, 1, lambdas), known=(1, 1.0))
    assert ordered.ellHat[0] == pytest.approx(1.0, rel=1e-6)
    assert "boundary" in ordered.flags
    loose = constrained_minimize(w, lambdas, LinearConstraints.homogeneous(lambdas).order(1, 0, lambdas), known=(1, 1.0))
    assert loose.ellHat[0] == pytest.approx(5.0, rel=1e-6)
    assert "boundary" not in loose.flags


def test_scheme_a_recovers_erlang_tail():
    spec = ProblemSpec(2, 1.0, 3.0)
    solution, report = scheme_a_run(spec, 3000, RandomStream(21))
    expected = math.exp(-3.0) * 4.0
    assert report.ellHat == pytest.approx(expected, rel=0.1)
    assert solution.ellHat[0] == pytest.approx(2.0 * math.exp(-3.0))
    assert solution.ellHat[0] / solution.ellHat[1] == pytest.approx(2.0 * math.exp(-3.0), rel=1e-8)
    assert RE_UNAVAILABLE in report.flags


def test_scheme_a_three_densities_and_jacobi():
    spec = ProblemSpec(3, 0.8, 8.0)
    three, _ = scheme_a_run(spec, 2000, RandomStream(22), SchemeAOptions(includeF3=False))
    assert three.ellHat.size == 3
    jacobi, _ = scheme_a_run(spec, 2000, RandomStream(22), SchemeAOptions(solver="jacobi"))
    homogeneous, _ = scheme_a_run(spec, 2000, RandomStream(22), SchemeAOptions(solver="ipm"))
    assert jacobi.ellHat[-1] == pytest.approx(homogeneous.ellHat[-1], rel=0.1)


def test_scheme_a_rejects_one_dimension():
    with pytest.raises(InfeasibleError):
        scheme_a_run(ProblemSpec(1, 0.5, 3.0), 100, RandomStream(0))


def test_nominal_run_in_one_dimension():
    spec = ProblemSpec(1, 1.0, 2.0)
    _, report = nominal_run(spec, 20_000, RandomStream(23))
    assert report.ellHat == pytest.approx(math.exp(-2.0), rel=0.1)


@pytest.mark.slow
@pytest.mark.parametrize("alpha, gamma", [(0.5, 4.0), (1.0, 3.0), (0.2, 10.0)])
def test_nominal_run_exactness_over_runs(alpha, gamma):
    spec = ProblemSpec(1, alpha, gamma)
    values = [nominal_run(spec, 2000, RandomStream(24).spawn(k))[1].ellHat for k in range(30)]
    se = np.std(values, ddof=1) / math.sqrt(len(values))
    assert abs(np.mean(values) - math.exp(-gamma ** alpha)) < 3.0 * se + 1e-12


@functools.lru_cache(maxsize=None)
def _schemeAReplicates(alpha, gamma, reps=30):
    spec = ProblemSpec(10, alpha, gamma)
    return tuple(scheme_a_run(spec, 10_000, RandomStream(25).spawn(k))[1].ellHat for k in range(reps))


@pytest.mark.slow
@pytest.mark.parametrize(
    "alpha, gamma, expected, rel",
    [
        (0.2, 1e4, 1.97e-2, 0.02),
        (0.9, 30.0, 1.33e-4, 0.03),
        (0.1, 1e10, 4.54e-4, 0.02),
        (0.1, 1e11, 3.41e-5, 0.02),
        (0.1, 1e12, 1.31e-6, 0.02),
        (0.1, 1e13, 2.16e-8, 0.02),
    ],
)
def test_scheme_a_reproduces_reference_values(alpha, gamma, expected, rel):
    values = _schemeAReplicates(alpha, gamma)
    assert np.mean(values) == pytest.approx(expected, rel=rel)
    assert efficiency_report(values, 1.0).re < 5e-3


@pytest.mark.slow
def test_scheme_a_relative_error_stays_bounded_as_gamma_grows():
    res = [efficiency_report(_schemeAReplicates(0.1, gamma), 1.0).re for gamma in (1e10, 1e11, 1e12, 1e13)]
    assert max(res) <= 3.0 * min(res)


@pytest.mark.slow
def test_estimators_match_the_erlang_tail_at_alpha_one():
    # sum of 10 unit exponentials, an exact answer for every method
    spec = ProblemSpec(10, 1.0, 20.0)
    expected = erlang_tail(ErlangPhase((1.0,) * 10, 20.0))
    ak = ak_estimate(spec, 40_000, RandomStream(26))
    assert abs(ak.ellHat - expected) <= 4.0 * ak.re * ak.ellHat
    table = build_marginal_table(gibbs_fs(spec, 20_000, RandomStream(27)), 0.5, True, RandomStream(28), spec)
    mcis = mcis_estimate(spec, table, 40_000, RandomStream(29))
    assert abs(mcis.ellHat - expected) <= 4.0 * mcis.re * mcis.ellHat
    three = SchemeAOptions(includeF3=False)
    values = [scheme_a_run(spec, 10_000, RandomStream(30).spawn(k), three)[1].ellHat for k in range(10)]
    elm = efficiency_report(values, 1.0)
    assert abs(elm.ellHat - expected) <= 4.0 * elm.re * elm.ellHat
