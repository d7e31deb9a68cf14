"""

The empirical likelihood engine. A sequence of densities f_t = w_t / ell_t is sampled, the pooled sample
is turned into a weight matrix W[t, j] = w_t(X_j) / f(X_j), and the unknown constants ell_t are recovered
by minimizing the convex empirical log-likelihood

    D(z) = (1/n) sum_j log(sum_k W[k, j] exp(z_k)) - sum_k lambda_k z_k,   z_k = -log(ell_k / lambda_k),

under linear constraints, or equivalently (homogeneous constraint only) by Jacobi iteration of the
moment-matching equations. D uses the 1/n normalization; the minimizer is the same as for the
unnormalized sum.

Also here: the Scheme-A four-density run (with its three-density variant) and the two-density nominal run.
"""

import logging;
import math;
import time;

import networkx as nx;
import numpy as np;
import scipy.linalg;
import scipy.optimize;
import scipy.special;

from dataclasses import dataclass, field;
from functools import cached_property;
from typing import Callable, List, Optional, Sequence, Tuple, Union;

from distributions import RandomStream, weibull_quantile;
from errors import (
    ConvergenceError,
    DisconnectedSupportError,
    DomainError,
    InfeasibleError,
);
from estimators import EstimateReport, make_report;
from samplers import (
    ChainOptions,
    MarginalTable,
    ProblemSpec,
    SampleBlock,
    build_marginal_table,
    exceedance_count,
    gibbs_f3,
    gibbs_fs,
    marginal_ratio,
    sample_f1,
    sample_f2,
    support_f3,
    support_fs,
);

logger = logging.getLogger(__name__);

RE_UNAVAILABLE: str = "re:unavailable";
PRECISION_FLOOR: str = "precision-floor";

# iteration cap of the Newton and interior-point loops (Jacobi keeps its own)
NEWTON_MAX_ITER: int = 200;
# iterations without measurable progress before the loop stops
STALL_WINDOW: int = 5;
# once progress stops, a KKT residual below PRECISION_SLACK * tol is accepted as converged
PRECISION_SLACK: float = 1e3;

WeightFunction = Callable[[np.ndarray], np.ndarray];


@dataclass(frozen=True)
class DensityComponent:
    """
    **Description**
    One member of a density sequence.

    **Properties**
    - `name`: str, label used in logs.
    - `weight`: callable mapping an (m, d) batch to w_t(x) / f(x), shape (m,).
    - `count`: int, sample allocation n_t.
    - `knownLogConstant`: Optional[float], log ell_t when known analytically.
    """

    name: str
    weight: WeightFunction
    count: int
    knownLogConstant: Optional[float] = None


class DensitySequence:
    """
    **Description**
    Ordered densities with their sample allocations. At least one member must have a known constant;
    the first such member is the reference used to fix the scale of the recovered constants.

    **Properties**
    - `components`: List[DensityComponent].
    - `counts`: np.ndarray, n_t.
    - `total`: int, n = sum n_t.
    - `lambdas`: np.ndarray, n_t / n.
    - `referenceIndex`: int, first component with a known constant.

    **Methods**
    - `reference`: (index, log constant) of the reference density.
    """

    def __init__(self, components: Sequence[DensityComponent]) -> None:
        self.components: List[DensityComponent] = list(components)
        if not self.components:
            raise DomainError("a density sequence needs at least one component")
        self.counts: np.ndarray = np.array([c.count for c in self.components], dtype=int)
        if np.any(self.counts < 1):
            raise DomainError(f"every density needs a positive allocation, got {self.counts.tolist()}")
        self.total: int = int(self.counts.sum())
        self.lambdas: np.ndarray = self.counts / self.total
        known = [t for t, c in enumerate(self.components) if c.knownLogConstant is not None]
        if not known:
            raise DomainError("at least one density must have a known normalizing constant")
        self.referenceIndex: int = known[0]

    def __len__(self) -> int:
        return len(self.components)

    def reference(self) -> Tuple[int, float]:
        return self.referenceIndex, float(self.components[self.referenceIndex].knownLogConstant)


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """
    **Description**
    The s x J matrix of weight ratios over the pooled sample. A column may stand for several identical
    samples through `multiplicity`, so every reduction below is a multiplicity-weighted sum.

    **Properties**
    - `entries`: np.ndarray, (s, J), non-negative.
    - `columnSources`: Optional[np.ndarray], density index of each column (None for synthetic matrices).
    - `multiplicity`: np.ndarray, (J,) positive column weights, default ones.
    - `s`: int, number of densities.
    - `n`: float, pooled sample size (sum of multiplicities).
    """

    entries: np.ndarray
    columnSources: Optional[np.ndarray] = None
    multiplicity: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        entries = np.array(self.entries, dtype=float, copy=True, ndmin=2)
        if not np.all(np.isfinite(entries)) or np.any(entries < 0):
            raise DomainError("weight matrix entries must be finite and non-negative")
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)
        columns = entries.shape[1]
        multiplicity = np.ones(columns) if self.multiplicity is None else np.asarray(self.multiplicity, dtype=float)
        if multiplicity.shape != (columns,) or np.any(multiplicity <= 0):
            raise DomainError("multiplicity must be a positive vector with one entry per column")
        object.__setattr__(self, "multiplicity", multiplicity)
        if self.columnSources is not None:
            sources = np.asarray(self.columnSources, dtype=int)
            if sources.shape != (columns,) or np.any(sources < 0) or np.any(sources >= entries.shape[0]):
                raise DomainError("columnSources must give a valid density index for every column")
            own = entries[sources, np.arange(columns)]
            outside = np.flatnonzero(own <= 0)
            if outside.size:
                raise DisconnectedSupportError(
                    f"{outside.size} pooled samples have zero weight under their own density "
                    f"(first columns: {outside[:10].tolist()})",
                    columns=outside.tolist(),
                )
            object.__setattr__(self, "columnSources", sources)

    @property
    def s(self) -> int:
        return self.entries.shape[0]

    @property
    def n(self) -> float:
        return float(self.multiplicity.sum())

    @cached_property
    def logEntries(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.entries)


@dataclass
class LinearConstraints:
    """
    **Description**
    Equality rows a . z = b and inequality rows a . z <= b on the s-vector z. Builders return new
    objects, so a constraint set can be extended without mutating the one it came from.

    **Methods**
    - `homogeneous`: The row lambda . z = 0 that removes the translation freedom of D.
    - `pin_ratio`: Equality log(ell_i / ell_j) = logRatio.
    - `order`: Inequality ell_i <= ell_j.
    - `hasHomogeneous`: Whether a row proportional to lambda is present.
    """

    eqRows: List[Tuple[np.ndarray, float]] = field(default_factory=list)
    ineqRows: List[Tuple[np.ndarray, float]] = field(default_factory=list)

    @classmethod
    def homogeneous(cls, lambdas: Sequence[float]) -> "LinearConstraints":
        return cls([(np.asarray(lambdas, dtype=float), 0.0)], [])

    def withEquality(self, coefficients: Sequence[float], rhs: float) -> "LinearConstraints":
        return LinearConstraints(self.eqRows + [(np.asarray(coefficients, dtype=float), float(rhs))], list(self.ineqRows))

    def withInequality(self, coefficients: Sequence[float], rhs: float) -> "LinearConstraints":
        return LinearConstraints(list(self.eqRows), self.ineqRows + [(np.asarray(coefficients, dtype=float), float(rhs))])

    def pin_ratio(self, i: int, j: int, logRatio: float, lambdas: Sequence[float]) -> "LinearConstraints":
        # log ell_t = log lambda_t - z_t, so log(ell_i/ell_j) = c  <=>  z_i - z_j = log lambda_i - log lambda_j - c
        lambdas = np.asarray(lambdas, dtype=float)
        row = np.zeros(lambdas.size)
        row[i], row[j] = 1.0, -1.0
        return self.withEquality(row, math.log(lambdas[i]) - math.log(lambdas[j]) - logRatio)

    def order(self, i: int, j: int, lambdas: Sequence[float]) -> "LinearConstraints":
        lambdas = np.asarray(lambdas, dtype=float)
        row = np.zeros(lambdas.size)
        row[i], row[j] = -1.0, 1.0
        return self.withInequality(row, -math.log(lambdas[i]) + math.log(lambdas[j]))

    def matrices(self, s: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        def stack(rows: List[Tuple[np.ndarray, float]]) -> Tuple[np.ndarray, np.ndarray]:
            if not rows:
                return np.zeros((0, s)), np.zeros(0)
            for a, _ in rows:
                if a.shape != (s,):
                    raise DomainError(f"constraint row has {a.size} coefficients, expected {s}")
            return np.vstack([a for a, _ in rows]), np.array([b for _, b in rows])

        A, b = stack(self.eqRows)
        G, h = stack(self.ineqRows)
        return A, b, G, h

    def hasHomogeneous(self, lambdas: Sequence[float]) -> bool:
        lambdas = np.asarray(lambdas, dtype=float)
        unit = lambdas / np.linalg.norm(lambdas)
        for a, b in self.eqRows:
            norm = np.linalg.norm(a)
            if norm > 0 and abs(b) <= 1e-14 * norm and abs(abs(a @ unit) - norm) <= 1e-12 * norm:
                return True
        return False


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-10
    maxIter: int = 100_000


@dataclass
class ElmSolution:
    """
    **Description**
    Result of an empirical likelihood solve.

    **Properties**
    - `zHat`: np.ndarray, the minimizer.
    - `ellHat`: np.ndarray, recovered constants lambda_t exp(-z_t), rescaled so the reference is exact.
    - `kktResidual`: float, max of stationarity, feasibility and complementarity residuals.
    - `iterations`: int.
    - `converged`: bool, kktResidual < tol, or the loop hit its rounding floor within PRECISION_SLACK * tol.
    - `flags`: List[str], e.g. `stalled`, `precision-floor`, `boundary`.
    """

    zHat: np.ndarray
    ellHat: np.ndarray
    kktResidual: float
    iterations: int
    converged: bool
    flags: List[str] = field(default_factory=list)
    eqMultipliers: Optional[np.ndarray] = None
    ineqMultipliers: Optional[np.ndarray] = None


def build_weight_matrix(seq: DensitySequence, pooled: Sequence[SampleBlock]) -> WeightMatrix:
    """
    **Description**
    Stack the sample blocks (ordered as the sequence) and evaluate every density's weight ratio on every
    pooled sample.

    **Params**
    - `seq`: DensitySequence.
    - `pooled`: one SampleBlock per density, block t holding n_t rows.

    **Returns**
    - WeightMatrix with column sources set.
    """
    if len(pooled) != len(seq):
        raise DomainError(f"got {len(pooled)} sample blocks for {len(seq)} densities")
    widths = {block.values.shape[1] for block in pooled}
    if len(widths) != 1:
        raise DomainError(f"sample blocks disagree on dimension: {sorted(widths)}")
    for t, (block, component) in enumerate(zip(pooled, seq.components)):
        if len(block) != component.count:
            raise DomainError(f"block {t} has {len(block)} rows, density '{component.name}' expects {component.count}")
    values = np.vstack([block.values for block in pooled])
    entries = np.vstack([np.asarray(c.weight(values), dtype=float).reshape(-1) for c in seq.components])
    sources = np.repeat(np.arange(len(seq)), seq.counts)
    return WeightMatrix(entries, columnSources=sources)


def check_connectivity(w: WeightMatrix) -> Tuple[bool, List[List[int]]]:
    """
    **Description**
    Vardi's condition: the graph on densities with an edge (i, j) whenever some pooled sample has positive
    weight under both is connected.

    **Params**
    - `w`: WeightMatrix.

    **Returns**
    - (connected, components) with components as sorted index lists.
    """
    positive = (w.entries > 0).astype(float)
    overlap = positive @ positive.T
    graph = nx.Graph()
    graph.add_nodes_from(range(w.s))
    rows, cols = np.nonzero(np.triu(overlap, k=1))
    graph.add_edges_from(zip(rows.tolist(), cols.tolist()))
    components = sorted(sorted(c) for c in nx.connected_components(graph))
    return len(components) == 1, components


def _requireConnected(w: WeightMatrix) -> None:
    connected, components = check_connectivity(w)
    if not connected:
        raise DisconnectedSupportError(f"support graph is disconnected: components {components}", components=components)


def _columnTerms(w: WeightMatrix, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-column log(sum_k W[k, j] e^{z_k}) and the responsibilities W[k, j] e^{z_k} / sum."""
    z = np.asarray(z, dtype=float)
    if z.shape != (w.s,):
        raise DomainError(f"z has shape {z.shape}, expected ({w.s},)")
    logTerms = w.logEntries + z[:, None]
    empty = np.flatnonzero(~np.isfinite(logTerms.max(axis=0)))
    if empty.size:
        raise DisconnectedSupportError(
            f"{empty.size} pooled samples have zero weight under every density (first columns: {empty[:10].tolist()})",
            columns=empty.tolist(),
        )
    logSums = scipy.special.logsumexp(logTerms, axis=0)  # 防溢出
    return logSums, np.exp(logTerms - logSums)


def objective_d(w: WeightMatrix, z: Sequence[float], lambdas: Sequence[float]) -> float:
    """
    **Description**
    D(z) = (1/n) sum_j log(sum_k W[k, j] e^{z_k}) - lambda . z; convex, and invariant under z + c*1
    because the lambdas sum to one.

    **Params**
    - `w`: WeightMatrix.
    - `z`: s-vector.
    - `lambdas`: s-vector of sample proportions.

    **Returns**
    - float.
    """
    logSums, _ = _columnTerms(w, np.asarray(z, dtype=float))
    return float(logSums @ w.multiplicity / w.n - np.asarray(lambdas, dtype=float) @ np.asarray(z, dtype=float))


def gradient_d(w: WeightMatrix, z: Sequence[float], lambdas: Sequence[float]) -> np.ndarray:
    """Mean responsibility of each density minus its lambda; the components sum to zero."""
    _, resp = _columnTerms(w, np.asarray(z, dtype=float))
    return resp @ w.multiplicity / w.n - np.asarray(lambdas, dtype=float)


def hessian_d(w: WeightMatrix, z: Sequence[float], lambdas: Sequence[float]) -> np.ndarray:
    """diag(mean responsibilities) - (1/n) R R^T; symmetric PSD with the ones vector in its null space."""
    _, resp = _columnTerms(w, np.asarray(z, dtype=float))
    weighted = resp * w.multiplicity
    hess = np.diag(weighted.sum(axis=1)) - weighted @ resp.T  # 对称半正定
    hess /= w.n
    return 0.5 * (hess + hess.T)


def recover_ell(z: np.ndarray, lambdas: Sequence[float], known: Optional[Tuple[int, float]] = None) -> np.ndarray:
    """
    **Description**
    Map z back to the constants, ell_t = lambda_t exp(-z_t), rescaled so `known` = (index, value) holds
    exactly. Without `known` the constants are only defined up to a common factor.
    """
    logEll = np.log(np.asarray(lambdas, dtype=float)) - np.asarray(z, dtype=float)
    if known is not None:
        index, value = known
        if not value > 0:
            raise DomainError(f"known constant must be positive, got {value}")
        logEll = logEll - logEll[index] + math.log(value)
    ell = np.exp(logEll)
    if known is not None:
        ell[known[0]] = known[1]
    return ell


def jacobi_solve(
    w: WeightMatrix,
    counts: Sequence[float],
    known: Tuple[int, float],
    tol: float = 1e-10,
    maxIter: int = 100_000
) -> np.ndarray:
    """
    **Description**
    Fixed-point (Jacobi) iteration of the moment-matching equations
    ell_i = sum_j W[i, j] / sum_k W[k, j] n_k / ell_k, started at ell = 1 and stopped when
    max_i |ell_i - ell*_i| / ell_i <= tol. Each iterate is rescaled to the known constant; the map is
    homogeneous of degree one, so this does not move the fixed point.

    **Params**
    - `w`: WeightMatrix.
    - `counts`: n_t per density.
    - `known`: (index, value) of the reference constant.
    - `tol`: float > 0.
    - `maxIter`: int.

    **Returns**
    - np.ndarray of constants with ell[known index] = known value.
    """
    if not tol > 0:
        raise DomainError(f"tol must be positive, got {tol}")
    counts = np.asarray(counts, dtype=float)
    if counts.shape != (w.s,):
        raise DomainError(f"counts has {counts.size} entries, expected {w.s}")
    _requireConnected(w)
    index, value = known
    entries = w.entries
    mult = w.multiplicity
    ell = np.ones(w.s)
    for iteration in range(1, maxIter + 1):
        denom = (counts / ell) @ entries  # sum_k n_k W[k, j] / ell_k
        if np.any(denom <= 0):
            raise DisconnectedSupportError("a pooled sample has zero weight under every density")
        updated = entries @ (mult / denom)
        updated *= value / updated[index]  # 归一到参考常数
        change = float(np.max(np.abs(updated - ell) / updated))
        ell = updated
        if change <= tol:
            logger.debug("jacobi converged after %d iterations", iteration)
            ell[index] = value
            return ell
    raise ConvergenceError(f"Jacobi iteration did not converge in {maxIter} iterations", lastIterate=ell, iterations=maxIter)


def _solveKkt(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        return scipy.linalg.solve(matrix, rhs)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning):
        return np.linalg.lstsq(matrix, rhs, rcond=None)[0]


def _feasibleStart(A: np.ndarray, b: np.ndarray, G: np.ndarray, h: np.ndarray, s: int) -> np.ndarray:
    """A point with A z = b and (when inequalities exist) G z < h strictly, via a phase-I linear program."""
    if G.shape[0] == 0:
        if A.shape[0] == 0:
            return np.zeros(s)
        z = np.linalg.lstsq(A, b, rcond=None)[0]
        if np.max(np.abs(A @ z - b), initial=0.0) > 1e-9 * (1.0 + np.max(np.abs(b), initial=0.0)):
            raise InfeasibleError("equality constraints are inconsistent")
        return z
    q = G.shape[0]
    cost = np.zeros(s + 1)
    cost[-1] = 1.0
    aUb = np.hstack([G, -np.ones((q, 1))])
    aEq = np.hstack([A, np.zeros((A.shape[0], 1))]) if A.shape[0] else None
    bounds = [(None, None)] * s + [(-1.0, None)]  # phase I: min t s.t. G z - t <= h
    result = scipy.optimize.linprog(cost, A_ub=aUb, b_ub=h, A_eq=aEq, b_eq=b if A.shape[0] else None, bounds=bounds, method="highs")
    if result.status != 0 or result.x[-1] >= -1e-12:
        raise InfeasibleError("constraint set has no strictly feasible point")
    return result.x[:s]


def _multipliers(A: np.ndarray, grad: np.ndarray) -> np.ndarray:
    if A.shape[0] == 0:
        return np.zeros(0)
    return np.linalg.lstsq(A.T, -grad, rcond=None)[0]


def _stopReason(residual: float, tol: float, solver: str) -> str:
    """Label a loop that stopped before reaching tol: the rounding floor or a genuine stall."""
    if residual < PRECISION_SLACK * tol:
        logger.debug("%s reached its rounding floor at KKT residual %.3g", solver, residual)
        return PRECISION_FLOOR
    logger.warning("%s stalled at KKT residual %.3g", solver, residual)
    return "stalled"


def _converged(residual: float, tol: float, flags: Sequence[str]) -> bool:
    return residual < tol or PRECISION_FLOOR in flags


def _equalityNewton(
    w: WeightMatrix,
    lambdas: np.ndarray,
    A: np.ndarray,
    b: np.ndarray,
    options: SolverOptions
) -> Tuple[np.ndarray, np.ndarray, float, int, List[str]]:
    """
    Feasible-start Newton with backtracking on D subject to A z = b. Stops at tol, or once D has not
    moved for STALL_WINDOW steps in a row.
    """
    s = w.s
    p = A.shape[0]
    z = _feasibleStart(A, b, np.zeros((0, s)), np.zeros(0), s)
    flags: List[str] = []
    value = objective_d(w, z, lambdas)
    residual = math.inf
    nu = np.zeros(p)
    cap = min(options.maxIter, NEWTON_MAX_ITER)
    idle = 0
    for iteration in range(1, cap + 1):
        grad = gradient_d(w, z, lambdas)
        nu = _multipliers(A, grad)
        residual = max(
            float(np.max(np.abs(grad + A.T @ nu))),
            float(np.max(np.abs(A @ z - b), initial=0.0)),
        )
        if residual < options.tol:
            return z, nu, residual, iteration - 1, flags
        if idle >= STALL_WINDOW:
            break
        hess = hessian_d(w, z, lambdas)
        kkt = np.block([[hess, A.T], [A, np.zeros((p, p))]])
        step = _solveKkt(kkt, np.concatenate([-grad, np.zeros(p)]))[:s]
        slope = float(grad @ step)  # 下降方向
        if slope >= 0:
            break
        t = 1.0
        while True:
            trial = z + t * step
            trialValue = objective_d(w, trial, lambdas)
            if trialValue <= value + 0.25 * t * slope or t < 1e-12:
                break
            t *= 0.5  # 回溯
        if trialValue > value + 1e-15 * (1.0 + abs(value)) and t < 1e-12:
            break
        # D flat to rounding: the step only shuffles the last bits of z
        idle = idle + 1 if value - trialValue <= 1e-15 * (1.0 + abs(value)) else 0
        z, value = trial, trialValue
        logger.debug("newton %d: D=%.15g residual=%.3g step=%.3g", iteration, value, residual, t)
    else:
        raise ConvergenceError(f"equality-constrained Newton did not converge in {cap} iterations", lastIterate=z, iterations=cap)
    grad = gradient_d(w, z, lambdas)
    nu = _multipliers(A, grad)
    residual = max(float(np.max(np.abs(grad + A.T @ nu))), float(np.max(np.abs(A @ z - b), initial=0.0)))
    flags.append(_stopReason(residual, options.tol, "newton"))
    return z, nu, residual, iteration, flags


def _primalDual(
    w: WeightMatrix,
    lambdas: np.ndarray,
    A: np.ndarray,
    b: np.ndarray,
    G: np.ndarray,
    h: np.ndarray,
    options: SolverOptions
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float, int, List[str]]:
    """Primal-dual interior-point iterations for min D s.t. A z = b, G z <= h."""
    s, p, q = w.s, A.shape[0], G.shape[0]
    z = _feasibleStart(A, b, G, h, s)
    mu = np.ones(q)
    nu = np.zeros(p)
    flags: List[str] = []
    growth, backtrack, shrink = 10.0, 0.01, 0.5

    def residuals(zz: np.ndarray, mm: np.ndarray, nn: np.ndarray, tt: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        slack = G @ zz - h
        dual = gradient_d(w, zz, lambdas) + G.T @ mm + A.T @ nn
        cent = -mm * slack - 1.0 / tt
        primal = A @ zz - b
        return dual, cent, primal

    cap = min(options.maxIter, NEWTON_MAX_ITER)
    best, idle = math.inf, 0
    for iteration in range(1, cap + 1):
        slack = G @ z - h
        gap = float(-slack @ mu)
        t = growth * q / max(gap, 1e-300)
        dual, cent, primal = residuals(z, mu, nu, t)
        residual = max(
            float(np.max(np.abs(dual))),
            float(np.max(np.abs(primal), initial=0.0)),
            gap,
        )
        if residual < options.tol:
            return z, nu, mu, residual, iteration - 1, flags
        # idle only counts within PRECISION_SLACK of tol
        if residual < best * (1.0 - 1e-3):
            best, idle = residual, 0
        elif residual < PRECISION_SLACK * options.tol:
            idle += 1
            if idle >= STALL_WINDOW:
                flags.append(_stopReason(residual, options.tol, "interior point"))
                return z, nu, mu, residual, iteration, flags
        hess = hessian_d(w, z, lambdas)
        kkt = np.block([
            [hess, G.T, A.T],
            [-mu[:, None] * G, -np.diag(slack), np.zeros((q, p))],
            [A, np.zeros((p, q)), np.zeros((p, p))],
        ])
        step = _solveKkt(kkt, -np.concatenate([dual, cent, primal]))
        dz, dmu, dnu = step[:s], step[s:s + q], step[s + q:]
        negative = dmu < 0
        stepLen = min(1.0, float(np.min(-mu[negative] / dmu[negative]))) if np.any(negative) else 1.0
        stepLen *= 0.99  # 保持严格可行
        while np.any(G @ (z + stepLen * dz) - h >= 0) and stepLen > 1e-16:
            stepLen *= shrink
        norm0 = np.linalg.norm(np.concatenate([dual, cent, primal]))
        while stepLen > 1e-16:
            trial = residuals(z + stepLen * dz, mu + stepLen * dmu, nu + stepLen * dnu, t)
            if np.linalg.norm(np.concatenate(trial)) <= (1.0 - backtrack * stepLen) * norm0:
                break
            stepLen *= shrink
        if stepLen <= 1e-16:
            flags.append(_stopReason(residual, options.tol, "interior point"))
            return z, nu, mu, residual, iteration, flags
        z, mu, nu = z + stepLen * dz, mu + stepLen * dmu, nu + stepLen * dnu
        logger.debug("ipm %d: residual=%.3g gap=%.3g step=%.3g", iteration, residual, gap, stepLen)
    raise ConvergenceError(f"interior point did not converge in {cap} iterations", lastIterate=z, iterations=cap)


def constrained_minimize(
    w: WeightMatrix,
    lambdas: Sequence[float],
    constraints: LinearConstraints,
    tol: float = 1e-10,
    known: Optional[Tuple[int, float]] = None,
    maxIter: int = 100_000
) -> ElmSolution:
    """
    **Description**
    Minimize D(z) subject to equality rows and inequality rows with the analytic gradient and Hessian.
    Equality-only problems use feasible-start Newton on the KKT system; inequalities switch to a
    primal-dual interior-point method started from a phase-I feasible point. The homogeneous row must be
    present.

    **Params**
    - `w`: WeightMatrix.
    - `lambdas`: s-vector of sample proportions.
    - `constraints`: LinearConstraints including the homogeneous row.
    - `tol`: float, KKT residual target.
    - `known`: optional (index, value) used to rescale the recovered constants.
    - `maxIter`: int, iteration cap (never above NEWTON_MAX_ITER).

    **Returns**
    - ElmSolution.
    """
    lambdas = np.asarray(lambdas, dtype=float)
    if lambdas.shape != (w.s,) or np.any(lambdas <= 0) or abs(lambdas.sum() - 1.0) > 1e-9:
        raise DomainError("lambdas must be a positive s-vector summing to one")
    if not constraints.hasHomogeneous(lambdas):
        raise DomainError("constraints must include the homogeneous row lambda . z = 0")
    _requireConnected(w)
    options = SolverOptions(tol=tol, maxIter=maxIter)
    A, b, G, h = constraints.matrices(w.s)
    if G.shape[0] == 0:
        z, nu, residual, iterations, flags = _equalityNewton(w, lambdas, A, b, options)
        mu = np.zeros(0)
    else:
        z, nu, mu, residual, iterations, flags = _primalDual(w, lambdas, A, b, G, h, options)
        active = np.abs(G @ z - h) < math.sqrt(tol)
        if np.any(active):
            flags.append("boundary")
    solution = ElmSolution(
        zHat=z,
        ellHat=recover_ell(z, lambdas, known),
        kktResidual=residual,
        iterations=iterations,
        converged=_converged(residual, tol, flags),
        flags=flags,
        eqMultipliers=nu,
        ineqMultipliers=mu,
    )
    logger.debug("constrained_minimize: %d iterations, residual %.3g, ell=%s", iterations, residual, solution.ellHat)
    return solution


def fixed_reference_minimize(
    w: WeightMatrix,
    lambdas: Sequence[float],
    known: Tuple[int, float],
    tol: float = 1e-10,
    maxIter: int = 100_000
) -> ElmSolution:
    """
    **Description**
    The alternative pinning convention: fix z at the reference density to zero and minimize over the
    rest, then rescale to the known constant. Agrees with the homogeneous-constraint path.
    """
    lambdas = np.asarray(lambdas, dtype=float)
    _requireConnected(w)
    row = np.zeros(w.s)
    row[known[0]] = 1.0
    z, nu, residual, iterations, flags = _equalityNewton(w, lambdas, row[None, :], np.zeros(1), SolverOptions(tol, maxIter))
    return ElmSolution(z, recover_ell(z, lambdas, known), residual, iterations, _converged(residual, tol, flags), flags, nu, np.zeros(0))


@dataclass(frozen=True)
class SchemeAOptions:
    """
    **Description**
    Knobs of the Scheme-A run.

    **Properties**
    - `includeF3`: bool, keep the residual density f3 (False gives the three-density variant).
    - `subsampleFraction`: float, share of the fs chain used for the marginal table.
    - `poolCoordinates`: bool, pool table constants across coordinates.
    - `chain`: ChainOptions for the Gibbs chains.
    - `solver`: str, `ipm` (E12-pinned constrained program) or `jacobi` (homogeneous information only).
    - `tol`: float, solver tolerance.
    - `maxIter`: int, solver iteration cap.
    """

    includeF3: bool = True
    subsampleFraction: float = 0.5
    poolCoordinates: bool = True
    chain: ChainOptions = ChainOptions()
    solver: str = "ipm"
    tol: float = 1e-10
    maxIter: int = 100_000


def _budgets(budgets: Union[int, Sequence[int]], s: int) -> List[int]:
    if isinstance(budgets, (int, np.integer)):
        return [int(budgets)] * s
    values = [int(v) for v in budgets]
    if len(values) != s:
        raise DomainError(f"expected {s} per-density budgets, got {len(values)}")
    return values


def scheme_a_sequence(
    spec: ProblemSpec,
    table: MarginalTable,
    budgets: Sequence[int],
    includeF3: bool = True
) -> DensitySequence:
    """
    **Description**
    The Scheme-A densities: f1 (single exceedance mixture, ell_1 = d exp(-gamma^alpha)), f2 (product of
    estimated marginals, ell_2 = 1), optionally f3 (S >= gamma with every coordinate below gamma) and the
    zero-variance density fs whose constant is the target.
    """
    gamma = spec.gamma
    components = [
        DensityComponent("f1", lambda x: exceedance_count(x, gamma).astype(float), budgets[0], math.log(spec.d) - spec.gammaPow),
        DensityComponent("f2", lambda x: np.atleast_1d(marginal_ratio(table, x)), budgets[1], 0.0),
    ]
    if includeF3:
        components.append(DensityComponent("f3", lambda x: support_f3(x, gamma).astype(float), budgets[2]))
    components.append(DensityComponent("fs", lambda x: support_fs(x, gamma).astype(float), budgets[-1]))
    return DensitySequence(components)


def scheme_a_run(
    spec: ProblemSpec,
    budgets: Union[int, Sequence[int]],
    rng: RandomStream,
    options: SchemeAOptions = SchemeAOptions()
) -> Tuple[ElmSolution, EstimateReport]:
    """
    **Description**
    One full Scheme-A run: sample every density, build the weight matrix, solve the empirical likelihood
    program with the homogeneous row and the f1/f2 ratio pinned to d exp(-gamma^alpha), and report the
    zero-variance constant ell_s.

    **Params**
    - `spec`: ProblemSpec with d >= 2.
    - `budgets`: n_t per density (an int applies to every density).
    - `rng`: RandomStream; each density draws from its own substream.
    - `options`: SchemeAOptions.

    **Returns**
    - (ElmSolution, EstimateReport) for ell_s.
    """
    if spec.d < 2:
        raise InfeasibleError("Scheme A needs d >= 2 (f3 and the exceedance mixture degenerate at d = 1)")
    start = time.perf_counter()
    s = 4 if options.includeF3 else 3
    counts = _budgets(budgets, s)
    fsBlock = gibbs_fs(spec, counts[-1], rng.spawn(3), options.chain)
    table = build_marginal_table(fsBlock, options.subsampleFraction, options.poolCoordinates, rng.spawn(4), spec)
    blocks = [sample_f1(spec, counts[0], rng.spawn(0)), sample_f2(table, counts[1], rng.spawn(1))]
    if options.includeF3:
        blocks.append(gibbs_f3(spec, counts[2], rng.spawn(2), options.chain))
    blocks.append(fsBlock)
    seq = scheme_a_sequence(spec, table, counts, options.includeF3)
    w = build_weight_matrix(seq, blocks)
    solution = _solveSequence(seq, w, options.solver, options.tol, options.maxIter, pinReference=(0, 1))
    seconds = time.perf_counter() - start
    report = make_report(solution.ellHat[-1], math.nan, seconds, seq.total, flags=(RE_UNAVAILABLE,))
    logger.info("scheme A (s=%d, %s): ell_s=%.6g in %.2fs", s, options.solver, solution.ellHat[-1], seconds)
    return solution, report


def _solveSequence(
    seq: DensitySequence,
    w: WeightMatrix,
    solver: str,
    tol: float,
    maxIter: int,
    pinReference: Optional[Tuple[int, int]] = None
) -> ElmSolution:
    index, logValue = seq.reference()
    known = (index, math.exp(logValue))
    if solver == "jacobi":
        ell = jacobi_solve(w, seq.counts, known, tol=tol, maxIter=maxIter)
        z = np.log(seq.lambdas) - np.log(ell)
        z -= seq.lambdas @ z
        return ElmSolution(z, ell, float(np.max(np.abs(gradient_d(w, z, seq.lambdas)))), 0, True)
    if solver != "ipm":
        raise DomainError(f"unknown solver '{solver}', expected 'ipm' or 'jacobi'")
    constraints = LinearConstraints.homogeneous(seq.lambdas)
    if pinReference is not None:
        i, j = pinReference
        logI = seq.components[i].knownLogConstant
        logJ = seq.components[j].knownLogConstant
        constraints = constraints.pin_ratio(i, j, logI - logJ, seq.lambdas)
    return constrained_minimize(w, seq.lambdas, constraints, tol=tol, known=known, maxIter=maxIter)


def nominal_run(
    spec: ProblemSpec,
    budgets: Union[int, Sequence[int]],
    rng: RandomStream,
    chain: ChainOptions = ChainOptions(),
    solver: str = "ipm",
    tol: float = 1e-10
) -> Tuple[ElmSolution, EstimateReport]:
    """
    **Description**
    The two-density scheme {f, fs}: iid nominal Weibull vectors (constant 1) pooled with a zero-variance
    chain. Works for every d including 1.

    **Returns**
    - (ElmSolution, EstimateReport) for ell = ell_fs.
    """
    start = time.perf_counter()
    counts = _budgets(budgets, 2)
    nominal = SampleBlock(
        np.reshape(weibull_quantile(spec.alpha, rng.spawn(0).uniform((counts[0], spec.d))), (counts[0], spec.d)),
        spec=spec,
    )
    fsBlock = gibbs_fs(spec, counts[1], rng.spawn(1), chain)
    gamma = spec.gamma
    seq = DensitySequence([
        DensityComponent("f", lambda x: np.ones(x.shape[0]), counts[0], 0.0),
        DensityComponent("fs", lambda x: support_fs(x, gamma).astype(float), counts[1]),
    ])
    w = build_weight_matrix(seq, [nominal, fsBlock])
    solution = _solveSequence(seq, w, solver, tol, 100_000)
    seconds = time.perf_counter() - start
    return solution, make_report(solution.ellHat[-1], math.nan, seconds, seq.total, flags=(RE_UNAVAILABLE,))
