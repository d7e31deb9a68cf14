"""

Scheme B: a variational lower bound ell_L <= ell, maximized by the cross-entropy method, used as the known
reference density of a two-density empirical likelihood problem.

In the exponential representation Y_i = X_i**alpha the event is {sum_i Y_i**(1/alpha) >= gamma}. For any
lambda > 0 the tangent plane S_L(y; lambda) lies below S(y), so {S_L >= gamma} is a sub-event whose
probability is the tail of a generalized Erlang (hypoexponential) law. Writing sorted rows through the
exponential spacings y_[i] = sum_{j<=i} Z_j / (d - j + 1) turns the linearized event into
sum_j beta_j Z_j >= gamma*, a sum of independent exponentials with rates 1 / beta_j.
"""

import logging
import math
import time

import mpmath
import numpy as np
import scipy.linalg

from dataclasses import dataclass
from typing import Sequence, Tuple, Union

from distributions import RandomStream
from elmCore import (
    RE_UNAVAILABLE,
    ElmSolution,
    LinearConstraints,
    WeightMatrix,
    constrained_minimize,
)
from errors import DegenerateEstimateError, DomainError
from estimators import EstimateReport, make_report
from samplers import ChainOptions, ProblemSpec, gibbs_lower_bound_density, gibbs_scheme_b

logger = logging.getLogger(__name__)

# rates closer than this (relative) go through the matrix exponential, never partial fractions
NEAR_EQUAL_RATES: float = 1e-8
# below this a double-precision expm result has too few correct digits to be trusted
EXPM_FLOOR: float = 1e-6
MAX_DIGITS: int = 4000


@dataclass(frozen=True)
class ErlangPhase:
    """
    **Description**
    A generalized Erlang law: the time to pass d exponential phases with the given rates. Its tail at
    `threshold` is (1, 0, ..., 0) exp(A threshold) 1 with A upper-bidiagonal, -rate_j on the diagonal and
    rate_j above it.

    **Properties**
    - `betas`: Tuple[float, ...], positive phase rates.
    - `threshold`: float >= 0.
    """

    betas: Tuple[float, ...]
    threshold: float

    def __post_init__(self) -> None:
        rates = tuple(float(b) for b in np.atleast_1d(self.betas))
        if not rates or not all(math.isfinite(b) and b > 0 for b in rates):
            raise DomainError(f"phase rates must be positive and finite, got {rates}")
        if not (math.isfinite(self.threshold) and self.threshold >= 0):
            raise DomainError(f"threshold must be finite and >= 0, got {self.threshold}")
        object.__setattr__(self, "betas", rates)
        object.__setattr__(self, "threshold", float(self.threshold))

    def generator(self) -> np.ndarray:
        rates = np.asarray(self.betas)
        return np.diag(-rates) + np.diag(rates[:-1], 1)


class VariationalParams:
    """
    **Description**
    The tangency point lambda of the lower bound S_L(y; lambda).

    **Properties**
    - `lambdas`: np.ndarray, positive d-vector.

    **Methods**
    - `linearWeights`: c_i = lambda_i**(1/alpha - 1), the weights of the linearized event on sorted rows.
    - `coefficients`: beta_j = (c_j + ... + c_d) / (d - j + 1), the spacing coefficients.
    - `gamma_star`: alpha gamma + (1 - alpha) sum_i lambda_i**(1/alpha).
    """

    def __init__(self, lambdas: Sequence[float]) -> None:
        values = np.asarray(lambdas, dtype=float).reshape(-1)
        if values.size == 0 or not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise DomainError("variational parameters must be a non-empty positive vector")
        self.lambdas: np.ndarray = values

    def __repr__(self) -> str:
        return f"VariationalParams(lambdas={self.lambdas.tolist()})"

    def linearWeights(self, alpha: float) -> np.ndarray:
        return np.power(self.lambdas, 1.0 / alpha - 1.0)

    def coefficients(self, alpha: float) -> np.ndarray:
        c = self.linearWeights(alpha)
        d = c.size
        return np.cumsum(c[::-1])[::-1] / (d - np.arange(d))

    def gamma_star(self, alpha: float, gamma: float) -> float:
        return alpha * gamma + (1.0 - alpha) * math.fsum(np.power(self.lambdas, 1.0 / alpha))


def _nearEqual(rates: np.ndarray) -> bool:
    ordered = np.sort(rates)
    return bool(np.any(np.diff(ordered) <= NEAR_EQUAL_RATES * ordered[1:]))


def _expmTail(phase: ErlangPhase) -> float:
    try:
        value = float(scipy.linalg.expm(phase.generator() * phase.threshold)[0].sum())
    except (ValueError, OverflowError, np.linalg.LinAlgError):
        return math.nan
    return value


def _logTailMatrix(phase: ErlangPhase) -> float:
    d = len(phase.betas)
    with mpmath.workdps(30 + 5 * d):
        a = mpmath.matrix(d, d)
        for j, rate in enumerate(phase.betas):
            a[j, j] = -mpmath.mpf(rate) * phase.threshold
            if j + 1 < d:
                a[j, j + 1] = mpmath.mpf(rate) * phase.threshold
        e = mpmath.expm(a)
        total = mpmath.fsum(e[0, k] for k in range(d))
        return float(mpmath.log(total)) if total > 0 else -math.inf


def _logTailPartialFractions(phase: ErlangPhase) -> float:
    rates = np.asarray(phase.betas)
    t = phase.threshold
    d = rates.size
    # digits needed: the largest term over the smallest possible result, exp(-min(rate) t)
    logCoef = np.array([
        np.sum(np.log10(np.abs(np.delete(rates, j) / (np.delete(rates, j) - rates[j])))) for j in range(d)
    ])
    largest = float(np.max(logCoef - rates * t / math.log(10)))
    digits = 30 + max(0, math.ceil(largest + float(rates.min()) * t / math.log(10)))
    if digits > MAX_DIGITS:
        logger.debug("partial fractions would need %d digits; using the matrix exponential", digits)
        return _logTailMatrix(phase)
    with mpmath.workdps(digits):
        r = [mpmath.mpf(float(v)) for v in rates]
        terms = []
        for j in range(d):
            coef = mpmath.mpf(1)
            for k in range(d):
                if k != j:
                    coef *= r[k] / (r[k] - r[j])
            terms.append(coef * mpmath.exp(-r[j] * t))
        total = mpmath.fsum(terms)
        if total <= 0:
            return _logTailMatrix(phase)
        return float(mpmath.log(total))


def log_erlang_tail(phase: ErlangPhase) -> float:
    """
    **Description**
    log Q(beta; threshold) in a form that stays finite when Q underflows double precision. Distinct rates
    use the hypoexponential partial fractions in extended precision; near-equal rates use the matrix
    exponential in extended precision.

    **Params**
    - `phase`: ErlangPhase.

    **Returns**
    - float <= 0.
    """
    if phase.threshold == 0.0:
        return 0.0
    rates = np.asarray(phase.betas)
    if rates.size == 1:
        return -float(rates[0]) * phase.threshold
    value = _logTailMatrix(phase) if _nearEqual(rates) else _logTailPartialFractions(phase)
    return min(value, 0.0)


def erlang_tail(phase: ErlangPhase) -> float:
    """
    **Description**
    Tail probability Q = (1, 0, ..., 0) exp(A threshold) 1 of the generalized Erlang law, clamped to
    [0, 1]. The double-precision matrix exponential is used while it carries enough digits; smaller tails
    come from the log-domain path.

    **Params**
    - `phase`: ErlangPhase.

    **Returns**
    - float in [0, 1].
    """
    if phase.threshold == 0.0:
        return 1.0
    value = _expmTail(phase)
    if not (math.isfinite(value) and value >= EXPM_FLOOR):
        value = math.exp(log_erlang_tail(phase))
    return min(max(value, 0.0), 1.0)


def _fastLogTail(phase: ErlangPhase) -> float:
    value = _expmTail(phase)
    if math.isfinite(value) and value >= EXPM_FLOOR:
        return math.log(min(value, 1.0))
    return log_erlang_tail(phase)


def s_lower(y: np.ndarray, params: VariationalParams, alpha: float) -> Union[float, np.ndarray]:
    """
    **Description**
    The tangent plane S_L(y; lambda) = (1/alpha) sum_i c_i y_i - ((1 - alpha)/alpha) sum_i lambda_i**(1/alpha);
    never above S(y) = sum_i y_i**(1/alpha) for 0 < alpha <= 1 and equal to it at y = lambda.

    **Params**
    - `y`: (d,) or (m, d) non-negative array.
    - `params`: VariationalParams.
    - `alpha`: float in (0, 1].

    **Returns**
    - float or (m,) array.
    """
    values = np.asarray(y, dtype=float)
    if np.any(values < 0):
        raise DomainError("s_lower is defined for y >= 0")
    offset = (1.0 - alpha) / alpha * math.fsum(np.power(params.lambdas, 1.0 / alpha))
    out = values @ params.linearWeights(alpha) / alpha - offset
    return float(out) if np.ndim(out) == 0 else out


def _phaseFor(params: VariationalParams, spec: ProblemSpec) -> ErlangPhase:
    if params.lambdas.size != spec.d:
        raise DomainError(f"variational parameters have {params.lambdas.size} entries, expected d={spec.d}")
    return ErlangPhase(tuple(1.0 / params.coefficients(spec.alpha)), params.gamma_star(spec.alpha, spec.gamma))


def bound_value(params: VariationalParams, spec: ProblemSpec) -> float:
    """
    **Description**
    ell_L(lambda) = P(S_L(Y; lambda) >= gamma) = Q(1/beta; gamma*), a lower bound on ell for every lambda.

    **Params**
    - `params`: VariationalParams with d entries.
    - `spec`: ProblemSpec.

    **Returns**
    - float in [0, 1].
    """
    return erlang_tail(_phaseFor(params, spec))


def log_bound_value(params: VariationalParams, spec: ProblemSpec) -> float:
    return log_erlang_tail(_phaseFor(params, spec))


@dataclass(frozen=True)
class CeOptions:
    """
    **Description**
    Cross-entropy search settings over log lambda.

    **Properties**
    - `population`: int, candidates per iteration.
    - `eliteFraction`: float in (0, 1], share of candidates refitting the sampling law.
    - `initialStd`: float, starting standard deviation (mean starts at 0).
    - `tol`: float, stop when the best bound changes by less than this (relative).
    - `maxIter`: int, iteration cap.
    """

    population: int = 1000
    eliteFraction: float = 0.5
    initialStd: float = 3.0
    tol: float = 1e-6
    maxIter: int = 10 ** 6

    def __post_init__(self) -> None:
        if self.population < 2 or not (0.0 < self.eliteFraction <= 1.0):
            raise DomainError("CE needs population >= 2 and eliteFraction in (0, 1]")
        if not (self.initialStd > 0 and self.tol > 0 and self.maxIter >= 1):
            raise DomainError("CE initialStd, tol and maxIter must be positive")


def _candidateScore(logLambdas: np.ndarray, spec: ProblemSpec) -> float:
    try:
        return _fastLogTail(_phaseFor(VariationalParams(np.exp(logLambdas)), spec))
    except (DomainError, OverflowError, FloatingPointError):
        return -math.inf


def ce_maximize_bound(
    spec: ProblemSpec,
    rng: RandomStream,
    options: CeOptions = CeOptions()
) -> Tuple[VariationalParams, float]:
    """
    **Description**
    Maximize the lower bound over lambda with the cross-entropy method: sample log lambda from independent
    normals, refit mean and standard deviation to the elite share, and stop once the best bound stops
    improving. The symmetric tangency point lambda_i = (gamma/d)**alpha seeds the incumbent, so the result
    is never worse than it.

    **Params**
    - `spec`: ProblemSpec.
    - `rng`: RandomStream.
    - `options`: CeOptions.

    **Returns**
    - (VariationalParams, ell_L) with ell_L = bound_value of the returned parameters.
    """
    if spec.alpha > 1.0:
        raise DomainError(f"the tangent-plane bound needs alpha <= 1, got {spec.alpha}")
    start = time.perf_counter()
    d = spec.d
    symmetric = np.full(d, math.log(max(spec.gamma / d, 1e-300)) * spec.alpha)
    bestLog, bestScore = symmetric, _candidateScore(symmetric, spec)
    mean = np.zeros(d)
    std = np.full(d, options.initialStd)
    eliteCount = max(1, math.ceil(options.eliteFraction * options.population))
    previous = -math.inf
    iteration = 0
    for iteration in range(1, options.maxIter + 1):
        candidates = mean + std * np.reshape(rng.normal((options.population, d)), (options.population, d))
        scores = np.array([_candidateScore(c, spec) for c in candidates])
        order = np.argsort(-scores, kind="stable")
        elite = candidates[order[:eliteCount]]
        mean, std = elite.mean(axis=0), elite.std(axis=0)
        top = float(scores[order[0]])
        if top > bestScore:
            bestLog, bestScore = candidates[order[0]].copy(), top
        logger.debug("ce %d: best log bound %.12g, max std %.3g", iteration, top, float(std.max()))
        if math.isfinite(top) and math.isfinite(previous) and abs(math.expm1(previous - top)) < options.tol:
            break
        previous = top
    finalScore = _candidateScore(mean, spec)
    if finalScore > bestScore:
        bestLog, bestScore = mean, finalScore
    params = VariationalParams(np.exp(bestLog))
    ellLower = bound_value(params, spec)
    logger.info("ce bound %.6g after %d iterations in %.2fs", ellLower, iteration, time.perf_counter() - start)
    return params, ellLower


@dataclass(frozen=True)
class SchemeBOptions:
    """
    **Description**
    Knobs of the Scheme-B run.

    **Properties**
    - `budgetRatio`: float, n1 / n2 when a single per-density budget is given.
    - `drawReference`: bool, draw the reference block from the lower-bound density instead of counting it
      as n1 virtual hits.
    - `chain`: ChainOptions for the chains.
    - `ce`: CeOptions for the bound search.
    - `tol`: float, solver tolerance.
    - `maxIter`: int, solver iteration cap.
    """

    budgetRatio: float = 1.0
    drawReference: bool = False
    chain: ChainOptions = ChainOptions()
    ce: CeOptions = CeOptions()
    tol: float = 1e-10
    maxIter: int = 100_000


def scheme_b_closed_form(pHat: float, n1: int, n2: int, ellLower: float) -> float:
    """Stationary point of the sufficient-statistic objective: ell_2 = ell_L n2 / (pHat - n1)."""
    if pHat > n1 + n2:
        raise DomainError(f"pHat={pHat} exceeds the pooled size {n1 + n2}")
    if pHat <= n1:
        raise DegenerateEstimateError("no chain sample lies in the linearized event; the estimate is unbounded")
    return ellLower * n2 / (pHat - n1)


def _schemeBBudgets(budgets: Union[int, Sequence[int]], ratio: float) -> Tuple[int, int]:
    if isinstance(budgets, (int, np.integer)):
        n2 = int(budgets)
        n1 = max(1, int(round(ratio * n2)))
    else:
        n1, n2 = (int(v) for v in budgets)
    if n1 < 1 or n2 < 1:
        raise DomainError(f"Scheme B budgets must be positive, got ({n1}, {n2})")
    return n1, n2


def scheme_b_run(
    spec: ProblemSpec,
    budgets: Union[int, Sequence[int]],
    rng: RandomStream,
    options: SchemeBOptions = SchemeBOptions()
) -> Tuple[ElmSolution, EstimateReport]:
    """
    **Description**
    One Scheme-B run. The bound density f1 (constant ell_L from the CE search) and the zero-variance
    density are pooled; every density weight is an indicator, so the objective only depends on the number
    pHat of pooled samples inside the linearized event. The matrix is stored as its distinct columns with
    multiplicities and solved with the homogeneous row and ell_1 <= ell_2.

    **Params**
    - `spec`: ProblemSpec.
    - `budgets`: (n1, n2), or one int n2 with n1 = budgetRatio * n2.
    - `rng`: RandomStream; the CE search, the chain and the reference draws use separate substreams.
    - `options`: SchemeBOptions.

    **Returns**
    - (ElmSolution, EstimateReport) for ell_2; ellHat[0] is ell_L.
    """
    start = time.perf_counter()
    n1, n2 = _schemeBBudgets(budgets, options.budgetRatio)
    params, ellLower = ce_maximize_bound(spec, rng.spawn(0), options.ce)
    if not ellLower > 0:
        raise DegenerateEstimateError("the lower bound underflowed to 0; no usable reference constant")
    weights = params.linearWeights(spec.alpha)
    gammaStar = params.gamma_star(spec.alpha, spec.gamma)
    chain = gibbs_scheme_b(spec, n2, rng.spawn(1), options.chain).values
    chainRows = np.vstack([chain @ weights >= gammaStar, np.ones(n2, dtype=bool)])
    if options.drawReference:
        reference = gibbs_lower_bound_density(params.coefficients(spec.alpha), gammaStar, n1, rng.spawn(2), options.chain).values
        inside = np.power(reference, 1.0 / spec.alpha).sum(axis=1) >= spec.gamma
        if not np.all(inside):
            logger.warning("%d reference rows fell outside {S >= gamma} after rounding", int(np.sum(~inside)))
        referenceRows = np.vstack([reference @ weights >= gammaStar, inside])
    else:
        referenceRows = np.ones((2, n1), dtype=bool)
    columns, multiplicity = np.unique(np.hstack([referenceRows, chainRows]).astype(float), axis=1, return_counts=True)
    pHat = int(np.sum(chainRows[0])) + int(np.sum(referenceRows[0]))
    logger.debug("scheme B: pHat=%d of n=%d (n1=%d)", pHat, n1 + n2, n1)
    closedForm = scheme_b_closed_form(pHat, n1, n2, ellLower)
    lambdas = np.array([n1, n2]) / (n1 + n2)
    if pHat == n1 + n2:
        solution = ElmSolution(
            zHat=np.log(lambdas) - np.log([ellLower, closedForm]) - (lambdas @ (np.log(lambdas) - np.log([ellLower, closedForm]))),
            ellHat=np.array([ellLower, closedForm]),
            kktResidual=0.0,
            iterations=0,
            converged=True,
            flags=["boundary"],
        )
        logger.warning("every pooled sample lies in the linearized event; ell_2 = ell_L on the boundary")
    else:
        w = WeightMatrix(columns, multiplicity=multiplicity.astype(float))
        constraints = LinearConstraints.homogeneous(lambdas).order(0, 1, lambdas)
        solution = constrained_minimize(w, lambdas, constraints, tol=options.tol, known=(0, ellLower), maxIter=options.maxIter)
    seconds = time.perf_counter() - start
    report = make_report(solution.ellHat[1], math.nan, seconds, n1 + n2, flags=(RE_UNAVAILABLE,) + tuple(solution.flags))
    logger.info("scheme B: ell_L=%.6g ell_2=%.6g in %.2fs", ellLower, solution.ellHat[1], seconds)
    return solution, report
