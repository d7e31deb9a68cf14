"""

Samplers for the densities of the Weibull-sum rare event: exact draws from the single-exceedance
mixture f1 and the product-of-marginals estimate f2, Gibbs chains for the residual density f3 and the
zero-variance density fs, the exponential-representation chains used by the lower-bound scheme, and the
marginal-ratio table that evaluates f2/f by sorted look-up.

Gibbs chains are sequential by nature; the uniforms for a whole chain are drawn up front so a chain is
a pure function of its RandomStream.
"""

import logging;
import math;

import numpy as np;

from dataclasses import dataclass;
from typing import List, Optional, Sequence;

from distributions import (
    RandomStream,
    WeibullParams,
    truncated_weibull_sample,
    weibull_quantile,
);
from errors import DomainError, InfeasibleError;

logger = logging.getLogger(__name__);

# Multiplicative nudge applied to rows that miss a support constraint by rounding only
_SUPPORT_NUDGE: float = 1.0 + 8.0 * np.finfo(float).eps;


@dataclass(frozen=True)
class ProblemSpec:
    """
    **Description**
    The estimation problem ell = P(X_1 + ... + X_d >= gamma) with X_i iid Weib(alpha, 1).

    **Properties**
    - `d`: int, dimension >= 1.
    - `alpha`: float, Weibull shape > 0.
    - `gamma`: float, threshold >= 0 (gamma = 0 is the certain event).
    """

    d: int
    alpha: float
    gamma: float

    def __post_init__(self) -> None:
        if int(self.d) != self.d or self.d < 1:
            raise DomainError(f"dimension must be a positive integer, got {self.d}")
        WeibullParams(self.alpha)
        if not (self.gamma >= 0.0) or not math.isfinite(self.gamma):
            raise DomainError(f"threshold must be finite and >= 0, got {self.gamma}")

    @property
    def gammaPow(self) -> float:
        return self.gamma ** self.alpha


@dataclass(frozen=True)
class ChainOptions:
    """Burn-in, thinning, coordinate permutation and optional feasible start for a Gibbs chain."""

    burnIn: int = 0
    thin: int = 1
    permute: bool = True
    start: Optional[Sequence[float]] = None

    def __post_init__(self) -> None:
        if self.burnIn < 0 or self.thin < 1:
            raise DomainError(f"need burnIn >= 0 and thin >= 1, got ({self.burnIn}, {self.thin})")


@dataclass(frozen=True, eq=False)
class SampleBlock:
    """
    **Description**
    An immutable n_t x d block of draws from density `sourceIndex` of a sequence.

    **Properties**
    - `values`: np.ndarray, read-only (n_t, d) matrix.
    - `sourceIndex`: int, index of the density the rows were drawn from.
    - `burnIn`: int, discarded sweeps (0 for exact samplers).
    - `thin`: int, sweeps per retained row (1 for exact samplers).
    - `spec`: Optional[ProblemSpec], the problem the block was drawn for.
    """

    values: np.ndarray
    sourceIndex: int = 0
    burnIn: int = 0
    thin: int = 1
    spec: Optional[ProblemSpec] = None

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float, copy=True, ndmin=2)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]

    def withSource(self, sourceIndex: int) -> "SampleBlock":
        return SampleBlock(self.values, sourceIndex, self.burnIn, self.thin, self.spec)


@dataclass(frozen=True, eq=False)
class MarginalTable:
    """
    **Description**
    Sorted constants C = max(0, gamma - sum_{k != i} X_k) taken from a zero-variance chain, with prefix
    sums of exp(C**alpha). One column when pooled over coordinates, otherwise one column per coordinate.

    **Properties**
    - `sortedConstants`: np.ndarray, (rows, 1) or (rows, d), each column non-decreasing.
    - `cumulativeWeights`: np.ndarray, prefix sums of exp(C**alpha) per column.
    - `sampleCount`: int, number of chain rows m that contributed.
    - `alpha`: float, Weibull shape.
    - `dimension`: int, d.
    - `pooled`: bool, whether coordinates share one column.
    """

    sortedConstants: np.ndarray
    cumulativeWeights: np.ndarray
    sampleCount: int
    alpha: float
    dimension: int
    pooled: bool = True

    @property
    def rows(self) -> int:
        return self.sortedConstants.shape[0]

    @property
    def normalizer(self) -> float:
        # constants per coordinate: m*d pooled, m per-coordinate
        return float(self.sampleCount * (self.dimension if self.pooled else 1))

    def column(self, i: int) -> int:
        return 0 if self.pooled else i


def _sweepSchedule(n: int, options: ChainOptions) -> int:
    if n < 1:
        raise DomainError(f"need at least one retained row, got n={n}")
    return options.burnIn + n * options.thin


def _retained(sweep: int, options: ChainOptions) -> bool:
    return sweep >= options.burnIn and (sweep - options.burnIn) % options.thin == 0


def _repairRowSums(values: np.ndarray, gamma: float, power: float = 1.0) -> np.ndarray:
    """Scale up rows whose sum of values**power misses gamma by rounding only."""
    if gamma <= 0.0:
        return values
    sums = np.sum(np.power(values, power), axis=1)
    short = sums < gamma
    for _ in range(8):
        if not np.any(short):
            break
        factor = np.power(gamma / np.maximum(sums[short], np.finfo(float).tiny), 1.0 / power)
        values[short] *= (factor * _SUPPORT_NUDGE)[:, None]
        sums = np.sum(np.power(values, power), axis=1)
        short = sums < gamma
    return values


def _startState(spec: ProblemSpec, options: ChainOptions) -> List[float]:
    if options.start is None:
        return [spec.gamma / spec.d] * spec.d
    start = [float(v) for v in options.start]
    if len(start) != spec.d:
        raise DomainError(f"start has {len(start)} coordinates, expected {spec.d}")
    if math.fsum(start) < spec.gamma:
        raise InfeasibleError("chain start lies outside the support {S >= gamma}")
    return start


def _emit(out: np.ndarray, k: int, state: List[float], perms: Optional[np.ndarray]) -> None:
    row = np.asarray(state)
    out[k] = row[perms[k]] if perms is not None else row


def gibbs_fs(
    spec: ProblemSpec,
    n: int,
    rng: RandomStream,
    options: ChainOptions = ChainOptions()
) -> SampleBlock:
    """
    **Description**
    Systematic-scan Gibbs chain for the zero-variance density fs = f * I{S >= gamma} / ell. Coordinate i
    is redrawn from the Weibull truncated to [(gamma - sum_{j != i} x_j)_+, inf). Each retained row is
    randomly permuted; the chain state itself is not.

    **Params**
    - `spec`: ProblemSpec.
    - `n`: int, rows to retain.
    - `rng`: RandomStream owned by this chain.
    - `options`: ChainOptions, burn-in / thinning / permutation / start (default start gamma/d each).

    **Returns**
    - SampleBlock whose rows all satisfy S >= gamma.
    """
    sweeps = _sweepSchedule(n, options)
    d, alpha, gamma = spec.d, spec.alpha, spec.gamma
    inv = 1.0 / alpha
    x = _startState(spec, options)
    logU = (-np.log(rng.uniform((sweeps, d)))).tolist()  # 整条链的指数变量一次取完
    perms = rng.permutations(n, d) if options.permute else None
    out = np.empty((n, d))
    k = 0
    for t in range(sweeps):
        total = math.fsum(x)
        draws = logU[t]
        for i in range(d):
            total -= x[i]
            c = gamma - total
            base = c ** alpha if c > 0.0 else 0.0
            x[i] = (base + draws[i]) ** inv  # 截断Weibull: 尾部无记忆
            total += x[i]
        if _retained(t, options):
            _emit(out, k, x, perms)
            k += 1
    out = _repairRowSums(out, gamma)
    logger.debug("gibbs_fs: %d rows, mean S=%.6g", n, float(np.mean(out.sum(axis=1))))
    return SampleBlock(out, sourceIndex=0, burnIn=options.burnIn, thin=options.thin, spec=spec)


def gibbs_f3(
    spec: ProblemSpec,
    n: int,
    rng: RandomStream,
    options: ChainOptions = ChainOptions()
) -> SampleBlock:
    """
    **Description**
    Gibbs chain for the residual density f3 = f * I{S >= gamma, max x_i < gamma} / ell_3. Every conditional
    is the Weibull truncated to [(gamma - sum_{j != i} x_j)_+, gamma).

    **Params**
    - `spec`: ProblemSpec with d >= 2.
    - `n`: int, rows to retain.
    - `rng`: RandomStream.
    - `options`: ChainOptions.

    **Returns**
    - SampleBlock whose rows satisfy S >= gamma and max < gamma.
    """
    if spec.d < 2:
        raise InfeasibleError("f3 needs d >= 2: {S >= gamma, max x_i < gamma} is empty when d = 1")
    if spec.gamma <= 0.0:
        raise InfeasibleError("f3 needs gamma > 0")
    sweeps = _sweepSchedule(n, options)
    d, alpha, gamma = spec.d, spec.alpha, spec.gamma
    inv = 1.0 / alpha
    gammaPow = gamma ** alpha
    ceiling = math.nextafter(gamma, 0.0)
    x = _startState(spec, options)
    if max(x) >= gamma:
        raise InfeasibleError("f3 chain start must have every coordinate below gamma")
    u = rng.standard_uniform((sweeps, d)).tolist()
    perms = rng.permutations(n, d) if options.permute else None
    out = np.empty((n, d))
    k = 0
    for t in range(sweeps):
        total = math.fsum(x)
        draws = u[t]
        for i in range(d):
            total -= x[i]
            c = gamma - total
            base = c ** alpha if c > 0.0 else 0.0
            mass = -math.expm1(base - gammaPow)  # P(base <= X**alpha < gamma**alpha)
            value = (base - math.log1p(-draws[i] * mass)) ** inv
            x[i] = min(value, ceiling)  # 上界gamma取不到
            total += x[i]
        if _retained(t, options):
            _emit(out, k, x, perms)
            k += 1
    out = _repairRowSums(out, gamma)
    np.minimum(out, ceiling, out=out)
    return SampleBlock(out, sourceIndex=0, burnIn=options.burnIn, thin=options.thin, spec=spec)


def sample_f1(spec: ProblemSpec, n: int, rng: RandomStream) -> SampleBlock:
    """
    **Description**
    Exact iid draws from f1 = f * sum_k I{x_k >= gamma} / (d * exp(-gamma**alpha)): choose a coordinate
    uniformly, draw it from the Weibull truncated to [gamma, inf), draw the rest untruncated.

    **Params**
    - `spec`: ProblemSpec.
    - `n`: int, rows.
    - `rng`: RandomStream.

    **Returns**
    - SampleBlock with at least one coordinate >= gamma in every row.
    """
    if n < 1:
        raise DomainError(f"need n >= 1, got {n}")
    d, alpha = spec.d, spec.alpha
    chosen = rng.integers(d, n)
    out = weibull_quantile(alpha, rng.uniform((n, d)))
    out = np.atleast_2d(out).reshape(n, d)
    out[np.arange(n), chosen] = truncated_weibull_sample(alpha, np.full(n, spec.gamma), math.inf, rng)
    return SampleBlock(out, sourceIndex=0, spec=spec)


def build_marginal_table(
    fsSamples: SampleBlock,
    subsampleFraction: float = 0.5,
    poolCoordinates: bool = True,
    rng: Optional[RandomStream] = None,
    spec: Optional[ProblemSpec] = None
) -> MarginalTable:
    """
    **Description**
    Build the sorted look-up table behind the product-of-marginals estimate f2. From a random subsample of
    m = floor(fraction * n_s) zero-variance rows it forms C_ji = max(0, gamma - sum_{k != i} X_jk), sorts
    them (pooled over coordinates by default, giving m*d constants) and stores prefix sums of exp(C**alpha).

    **Params**
    - `fsSamples`: SampleBlock from `gibbs_fs`.
    - `subsampleFraction`: float in (0, 1], fraction of rows to keep.
    - `poolCoordinates`: bool, share one column of constants across coordinates.
    - `rng`: RandomStream for the subsample (all rows, in order, when omitted and fraction is 1).
    - `spec`: ProblemSpec, defaults to `fsSamples.spec`.

    **Returns**
    - MarginalTable.
    """
    spec = spec or fsSamples.spec
    if spec is None:
        raise DomainError("build_marginal_table needs the ProblemSpec of the chain")
    values = fsSamples.values
    if values.size == 0 or len(fsSamples) == 0:
        raise DomainError("cannot build a marginal table from an empty sample block")
    if not (0.0 < subsampleFraction <= 1.0):
        raise DomainError(f"subsampleFraction must lie in (0, 1], got {subsampleFraction}")
    m = int(math.floor(subsampleFraction * len(fsSamples)))
    if m < 1:
        raise DomainError(f"subsample of {subsampleFraction} x {len(fsSamples)} rows is empty")
    if m < len(fsSamples):
        if rng is None:
            raise DomainError("a RandomStream is required to subsample the chain")
        values = values[rng.generator.choice(len(fsSamples), size=m, replace=False)]
    constants = np.maximum(0.0, spec.gamma - (values.sum(axis=1, keepdims=True) - values))  # C_ji, 每个坐标的剩余阈值
    if poolCoordinates:
        constants = np.sort(constants.ravel())[:, None]
    else:
        constants = np.sort(constants, axis=0)
    weights = np.cumsum(np.exp(np.power(constants, spec.alpha)), axis=0)
    logger.debug("marginal table: m=%d, %d constants per column", m, constants.shape[0])
    return MarginalTable(constants, weights, m, spec.alpha, spec.d, poolCoordinates)


def marginal_ratio(table: MarginalTable, x: np.ndarray) -> np.ndarray:
    """
    **Description**
    Evaluate f2(x) / f(x) = prod_i (1/m) sum_j exp(C_ji**alpha) I{x_i >= C_ji} by binary search: the
    rightmost constant <= x_i selects the prefix sum. A coordinate below every constant gives 0.

    **Params**
    - `table`: MarginalTable.
    - `x`: np.ndarray, one point (d,) or a batch (n, d).

    **Returns**
    - float for one point, np.ndarray (n,) for a batch.
    """
    if table.rows == 0:
        raise DomainError("marginal table is empty")
    points = np.atleast_2d(np.asarray(x, dtype=float))
    if points.shape[1] != table.dimension:
        raise DomainError(f"points have {points.shape[1]} coordinates, table expects {table.dimension}")
    factors = np.empty_like(points)
    for i in range(table.dimension):
        col = table.column(i)
        idx = np.searchsorted(table.sortedConstants[:, col], points[:, i], side="right") - 1  # 二分查找
        inside = idx >= 0
        factors[:, i] = np.where(inside, table.cumulativeWeights[np.maximum(idx, 0), col], 0.0)
    ratio = np.prod(factors / table.normalizer, axis=1)
    return float(ratio[0]) if np.ndim(x) == 1 else ratio


def sample_f2(table: MarginalTable, n: int, rng: RandomStream) -> SampleBlock:
    """
    **Description**
    Draw iid rows from the product-of-marginals estimate f2: each coordinate picks a stored constant C
    uniformly and returns (C**alpha - log U)**(1/alpha).

    **Params**
    - `table`: MarginalTable.
    - `n`: int, rows.
    - `rng`: RandomStream.

    **Returns**
    - SampleBlock.
    """
    if table.rows == 0:
        raise DomainError("marginal table is empty")
    if n < 1:
        raise DomainError(f"need n >= 1, got {n}")
    d = table.dimension
    picks = rng.integers(table.rows, (n, d))
    columns = np.zeros(d, dtype=int) if table.pooled else np.arange(d)
    constants = table.sortedConstants[picks, columns[None, :]]
    out = np.power(np.power(constants, table.alpha) - np.log(rng.uniform((n, d))), 1.0 / table.alpha)
    return SampleBlock(out, sourceIndex=0)


def gibbs_scheme_b(
    spec: ProblemSpec,
    n: int,
    rng: RandomStream,
    options: ChainOptions = ChainOptions()
) -> SampleBlock:
    """
    **Description**
    Gibbs chain in the exponential representation Y_i = X_i**alpha, targeting f(y) I{sum y_i**(1/alpha) >= gamma}
    / ell with f the Exp(1) product density. The conditional draw is y_i = (gamma - sum_{j != i} y_j**(1/alpha))_+**alpha
    - log U. Retained rows are sorted ascending.

    **Params**
    - `spec`: ProblemSpec.
    - `n`: int, rows to retain.
    - `rng`: RandomStream.
    - `options`: ChainOptions; a start is given in the y coordinates.

    **Returns**
    - SampleBlock of sorted exponential-representation rows.
    """
    sweeps = _sweepSchedule(n, options)
    d, alpha, gamma = spec.d, spec.alpha, spec.gamma
    inv = 1.0 / alpha
    if options.start is None:
        y = [(gamma / d) ** alpha] * d
    else:
        y = [float(v) for v in options.start]
        if len(y) != d or math.fsum(v ** inv for v in y) < gamma:
            raise InfeasibleError("chain start lies outside {sum y_i^(1/alpha) >= gamma}")
    logU = (-np.log(rng.uniform((sweeps, d)))).tolist()
    out = np.empty((n, d))
    k = 0
    for t in range(sweeps):
        total = math.fsum(v ** inv for v in y)
        draws = logU[t]
        for i in range(d):
            total -= y[i] ** inv
            c = gamma - total
            y[i] = (c ** alpha if c > 0.0 else 0.0) + draws[i]
            total += y[i] ** inv
        if _retained(t, options):
            out[k] = y
            k += 1
    out = _repairRowSums(out, gamma, power=inv)
    out.sort(axis=1)
    return SampleBlock(out, sourceIndex=0, burnIn=options.burnIn, thin=options.thin, spec=spec)


def order_statistic_map(z: np.ndarray) -> np.ndarray:
    """x_[i] = sum_{j <= i} z_j / (d - j + 1): iid Exp(1) spacings to sorted Exp(1) order statistics."""
    z = np.atleast_2d(z)
    d = z.shape[1]
    return np.cumsum(z / (d - np.arange(d))[None, :], axis=1)


def gibbs_lower_bound_density(
    betaStar: Sequence[float],
    gammaStar: float,
    n: int,
    rng: RandomStream,
    options: ChainOptions = ChainOptions()
) -> SampleBlock:
    """
    **Description**
    Gibbs chain on iid Exp(1) spacings z restricted to {sum_j z_j beta_j >= gammaStar}; conditionals are
    z_i = max(0, (gammaStar - sum_{j != i} z_j beta_j) / beta_i) - log U. Rows are returned through the
    order-statistic map, so each row is non-decreasing and lies in the linearized event.

    **Params**
    - `betaStar`: sequence of positive coefficients beta_j from the variational map.
    - `gammaStar`: float > 0, the linearized threshold.
    - `n`: int, rows.
    - `rng`: RandomStream.
    - `options`: ChainOptions (permutation is ignored: spacings are not exchangeable).

    **Returns**
    - SampleBlock of sorted exponential-representation rows.
    """
    beta = [float(b) for b in betaStar]
    if not beta or min(beta) <= 0.0:
        raise DomainError("betaStar must be non-empty and strictly positive")
    if not (gammaStar > 0.0):
        raise DomainError(f"gammaStar must be positive, got {gammaStar}")
    d = len(beta)
    sweeps = _sweepSchedule(n, options)
    if options.start is None:
        z = [gammaStar / (d * b) for b in beta]
    else:
        z = [float(v) for v in options.start]
    logU = (-np.log(rng.uniform((sweeps, d)))).tolist()
    spacings = np.empty((n, d))
    k = 0
    for t in range(sweeps):
        total = math.fsum(zj * bj for zj, bj in zip(z, beta))
        draws = logU[t]
        for i in range(d):
            total -= z[i] * beta[i]
            floor = (gammaStar - total) / beta[i]
            z[i] = (floor if floor > 0.0 else 0.0) + draws[i]
            total += z[i] * beta[i]
        if _retained(t, options):
            spacings[k] = z
            k += 1
    spacings = _repairLinear(spacings, np.asarray(beta), gammaStar)
    rows = order_statistic_map(spacings)
    # the same event read on the order statistics: weights c_i with sum_{i >= j} c_i = (d-j+1) beta_j
    tailSums = (d - np.arange(d)) * np.asarray(beta)
    coefficients = tailSums - np.append(tailSums[1:], 0.0)
    rows = _repairLinear(rows, coefficients, gammaStar)
    return SampleBlock(rows, sourceIndex=0, burnIn=options.burnIn, thin=options.thin)


def _repairLinear(values: np.ndarray, weights: np.ndarray, threshold: float) -> np.ndarray:
    sums = values @ weights
    short = sums < threshold
    for _ in range(8):
        if not np.any(short):
            break
        values[short] *= (threshold / np.maximum(sums[short], np.finfo(float).tiny) * _SUPPORT_NUDGE)[:, None]
        sums = values @ weights
        short = sums < threshold
    return values


def support_fs(values: np.ndarray, gamma: float) -> np.ndarray:
    """I{S >= gamma} per row."""
    return np.sum(values, axis=1) >= gamma


def support_f3(values: np.ndarray, gamma: float) -> np.ndarray:
    """I{S >= gamma, max < gamma} per row."""
    return support_fs(values, gamma) & (np.max(values, axis=1) < gamma)


def exceedance_count(values: np.ndarray, gamma: float) -> np.ndarray:
    """Number of coordinates >= gamma per row (the f1 weight)."""
    return np.sum(values >= gamma, axis=1)
