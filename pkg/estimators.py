"""

Benchmark estimators for ell = P(X_1 + ... + X_d >= gamma): crude Monte Carlo, the Asmussen-Kroese
conditional estimator and importance sampling from the estimated product of marginals (MCIS), together
with the efficiency metrics used to compare every method: relative error (RE), relative variance (RV)
and the relative time-variance product (RTVP).

Two RE paths exist. `re:within-run` is the estimate sd(Z) / (ell * sqrt(N)) from the sample of one
run; `re:between-runs` is sd / (mean * sqrt(K)) over K independent full runs (`efficiency_report`), the RE
of their average. RTVP is always total seconds times RV.
"""

import logging
import math
import time

import numpy as np

from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Optional, Sequence, Tuple

from distributions import RandomStream, weibull_quantile, weibull_tail
from errors import DegenerateEstimateError, DomainError
from samplers import MarginalTable, ProblemSpec, marginal_ratio, sample_f2, support_fs

logger = logging.getLogger(__name__)

WITHIN_RUN: str = "re:within-run"
BETWEEN_RUNS: str = "re:between-runs"
NO_HITS: str = "no-hits"

# rows generated per vectorized chunk; bounds memory at about 8 MB per 10 coordinates
CHUNK_ROWS: int = 100_000


@dataclass(frozen=True)
class EstimateReport:
    """
    **Description**
    Outcome of one estimator call or of K aggregated replications.

    **Properties**
    - `ellHat`: float, the estimate in [0, 1].
    - `re`: float, relative error (NaN when undefined, e.g. no hits).
    - `rv`: float, re squared.
    - `rtvp`: float, total seconds times rv.
    - `cpuSeconds`: float, wall time of one full run (mean over replications when aggregated).
    - `n`: int, sample budget of one run.
    - `reps`: int, replications behind the RE.
    - `perRunRe`: float, the RE of one run, re * sqrt(reps).
    - `flags`: Tuple[str, ...], labels such as `no-hits` and the RE source.
    """

    ellHat: float
    re: float
    rv: float
    rtvp: float
    cpuSeconds: float
    n: int
    reps: int = 1
    flags: Tuple[str, ...] = field(default_factory=tuple)

    def withFlags(self, *extra: str) -> "EstimateReport":
        return replace(self, flags=tuple(self.flags) + tuple(f for f in extra if f not in self.flags))

    @property
    def perRunRe(self) -> float:
        # spread of a single run; equals re unless replications were averaged
        return self.re * math.sqrt(self.reps)


def make_report(
    ellHat: float,
    re: float,
    totalSeconds: float,
    n: int,
    reps: int = 1,
    flags: Sequence[str] = (),
    cpuSeconds: Optional[float] = None
) -> EstimateReport:
    """Assemble a report keeping rv = re**2 and rtvp = totalSeconds * rv."""
    rv = re * re
    return EstimateReport(
        ellHat=float(ellHat),
        re=float(re),
        rv=float(rv),
        rtvp=float(totalSeconds * rv),
        cpuSeconds=float(totalSeconds if cpuSeconds is None else cpuSeconds),
        n=int(n),
        reps=int(reps),
        flags=tuple(flags),
    )


def relative_time_variance_product(variance: float, ell: float, seconds: float) -> float:
    """RTVP = seconds * Var(Z) / ell**2 for a per-sample variance and per-sample cost."""
    if ell == 0:
        raise DegenerateEstimateError("RTVP is undefined for ell = 0")
    return seconds * variance / (ell * ell)


def _chunks(n: int, size: int = CHUNK_ROWS) -> Iterator[int]:
    remaining = n
    while remaining > 0:
        step = min(size, remaining)
        yield step
        remaining -= step


class _Moments:
    """Running sum / sum of squares of a sample, merged chunk by chunk."""

    def __init__(self) -> None:
        self.count: int = 0
        self.mean: float = 0.0
        self.m2: float = 0.0

    def add(self, values: np.ndarray) -> None:
        if values.size == 0:
            return
        chunkMean = float(np.mean(values))
        chunkM2 = float(np.sum((values - chunkMean) ** 2))
        total = self.count + values.size
        delta = chunkMean - self.mean
        self.m2 += chunkM2 + delta * delta * self.count * values.size / total
        self.mean += delta * values.size / total
        self.count = total

    @property
    def variance(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else 0.0


def _withinRunReport(moments: _Moments, seconds: float, n: int) -> EstimateReport:
    if moments.mean == 0.0:
        logger.warning("no hits in %d samples; the event is too rare for this budget", n)
        return make_report(0.0, math.nan, seconds, n, flags=(NO_HITS, WITHIN_RUN))
    re = math.sqrt(moments.variance) / (moments.mean * math.sqrt(n))
    return make_report(moments.mean, re, seconds, n, flags=(WITHIN_RUN,))


def _checkBudget(n: int) -> None:
    if n < 1:
        raise DomainError(f"sample budget must be >= 1, got {n}")


def cmc_estimate(spec: ProblemSpec, n: int, rng: RandomStream) -> EstimateReport:
    """
    **Description**
    Crude Monte Carlo: the mean of I{S(X) >= gamma} over n iid Weibull vectors. With no hits the report
    carries ell = 0, re = NaN and the `no-hits` flag instead of raising.

    **Params**
    - `spec`: ProblemSpec.
    - `n`: int, number of vectors.
    - `rng`: RandomStream.

    **Returns**
    - EstimateReport with the within-run RE.
    """
    _checkBudget(n)
    start = time.perf_counter()
    moments = _Moments()
    for rows in _chunks(n):
        x = weibull_quantile(spec.alpha, rng.uniform((rows, spec.d)))
        moments.add(support_fs(np.reshape(x, (rows, spec.d)), spec.gamma).astype(float))
    return _withinRunReport(moments, time.perf_counter() - start, n)


def ak_estimate(spec: ProblemSpec, n: int, rng: RandomStream) -> EstimateReport:
    """
    **Description**
    Asmussen-Kroese conditional estimator. Each replication draws d - 1 Weibull variates and returns
    Y = d * Fbar(max(gamma - sum_{j<d} X_j, max_{j<d} X_j)); the mean is unbiased for ell. At d = 1 every
    replication equals Fbar(gamma) exactly.

    **Params**
    - `spec`: ProblemSpec.
    - `n`: int, replications.
    - `rng`: RandomStream.

    **Returns**
    - EstimateReport with the within-run RE.
    """
    _checkBudget(n)
    start = time.perf_counter()
    moments = _Moments()
    for rows in _chunks(n):
        if spec.d == 1:
            y = np.full(rows, weibull_tail(spec.alpha, spec.gamma))
        else:
            x = np.reshape(weibull_quantile(spec.alpha, rng.uniform((rows, spec.d - 1))), (rows, spec.d - 1))
            level = np.maximum(spec.gamma - x.sum(axis=1), x.max(axis=1))
            y = spec.d * weibull_tail(spec.alpha, level)
        moments.add(np.asarray(y, dtype=float))
    return _withinRunReport(moments, time.perf_counter() - start, n)


def mcis_estimate(spec: ProblemSpec, table: MarginalTable, m: int, rng: RandomStream) -> EstimateReport:
    """
    **Description**
    Importance sampling from the product-of-marginals estimate of the zero-variance density:
    mean of I{S(Y) >= gamma} / marginal_ratio(Y) over Y_1..Y_m drawn by `sample_f2`.

    **Params**
    - `spec`: ProblemSpec.
    - `table`: MarginalTable built from a zero-variance chain.
    - `m`: int, importance samples.
    - `rng`: RandomStream.

    **Returns**
    - EstimateReport with the within-run RE. Raises DegenerateEstimateError when a hit has ratio 0.
    """
    _checkBudget(m)
    start = time.perf_counter()
    moments = _Moments()
    for rows in _chunks(m):
        y = sample_f2(table, rows, rng).values
        hits = support_fs(y, spec.gamma)
        ratio = marginal_ratio(table, y)
        if np.any(hits & (ratio <= 0.0)):
            raise DegenerateEstimateError("importance density vanishes at a sampled hit; the table does not cover the event")
        z = np.zeros(rows)
        z[hits] = 1.0 / ratio[hits]
        moments.add(z)
    return _withinRunReport(moments, time.perf_counter() - start, m)


def efficiency_report(
    replicates: Sequence[float],
    perRunSeconds: float,
    n: int = 0,
    flags: Sequence[str] = ()
) -> EstimateReport:
    """
    **Description**
    Aggregate K >= 2 independent full runs, treating each run's estimate as one observation: ell = mean,
    re = sd / (mean sqrt(K)), the relative error of the averaged estimator, rv = re**2 and
    rtvp = (K * perRunSeconds) * rv. The spread of a single run is re * sqrt(reps).

    **Params**
    - `replicates`: sequence of per-run estimates.
    - `perRunSeconds`: float, mean wall time of one run.
    - `n`: int, sample budget of one run (reported only).
    - `flags`: extra flags to carry.

    **Returns**
    - EstimateReport flagged `re:between-runs`.
    """
    values = np.asarray(replicates, dtype=float)
    if values.size < 2:
        raise DomainError(f"need at least 2 replicates, got {values.size}")
    mean = float(np.mean(values))
    if mean == 0.0:
        raise DegenerateEstimateError("mean of the replicates is 0; relative error is undefined")
    re = float(np.std(values, ddof=1)) / (abs(mean) * math.sqrt(values.size))
    return make_report(
        mean,
        re,
        values.size * perRunSeconds,
        n,
        reps=values.size,
        flags=tuple(flags) + (BETWEEN_RUNS,),
        cpuSeconds=perRunSeconds,
    )


def timed(call: Callable[[], object]) -> Tuple[object, float]:
    """Run `call` under a monotonic clock; returns (result, seconds)."""
    start = time.perf_counter()
    result = call()
    return result, time.perf_counter() - start
