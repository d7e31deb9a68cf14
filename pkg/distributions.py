"""

Primitive random-variate generation for the Weibull and exponential families, with an explicit,
splittable random stream. Every sampler has a pure inverse-transform twin (`*_quantile`) that takes
the uniforms directly, so the samplers are exactly reproducible from their uniforms.
"""

import hashlib
import logging
import math

import numpy as np

from typing import Optional, Sequence, Tuple, Union

from errors import DomainError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

# Weibull with alpha below this is treated as heavy-tailed in log messages
HEAVY_TAIL_SHAPE: float = 1.0


class RandomStream:
    """
    **Description**
    A seedable random stream identified by `(seed, streamId)`. The bit generator is the counter-based
    Philox keyed through a `numpy.random.SeedSequence` whose spawn key is the stream path, so distinct
    stream ids give independent substreams and a fixed `(seed, streamId)` replays the same variates.

    **Properties**
    - `seed`: int, the 64-bit root seed.
    - `streamId`: int, the substream index at this level.
    - `path`: Tuple[int, ...], the full spawn key from the root.
    - `generator`: np.random.Generator, the owned generator (single owner, not thread-shared).

    **Methods**
    - `spawn`: Derive a child substream by integer index.
    - `derive`: Derive a child substream from a text label (stable hash).
    - `uniform`: Uniforms in (0, 1].
    - `standard_uniform`: Uniforms in [0, 1).
    - `normal`: Standard normals.
    - `integers`: Uniform integers in [0, high).
    - `permutations`: One random permutation of range(d) per row.
    """

    def __init__(self, seed: int, streamId: int = 0, _parent: Tuple[int, ...] = ()) -> None:
        if seed < 0 or streamId < 0:
            raise DomainError(f"seed and streamId must be non-negative, got ({seed}, {streamId})")
        self.seed: int = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.streamId: int = int(streamId) & 0xFFFFFFFFFFFFFFFF
        self.path: Tuple[int, ...] = tuple(_parent) + (self.streamId,)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.generator: np.random.Generator = np.random.Generator(np.random.Philox(sequence))

    def __repr__(self) -> str:
        return f"RandomStream(seed={self.seed}, path={self.path})"

    def spawn(self, index: int) -> "RandomStream":
        return RandomStream(self.seed, index, _parent=self.path)

    def derive(self, label: str) -> "RandomStream":
        digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
        return self.spawn(int.from_bytes(digest, "little"))

    def uniform(self, size: Optional[Union[int, Tuple[int, ...]]] = None) -> ArrayLike:
        return 1.0 - self.generator.random(size)

    def standard_uniform(self, size: Optional[Union[int, Tuple[int, ...]]] = None) -> ArrayLike:
        return self.generator.random(size)

    def normal(self, size: Optional[Union[int, Tuple[int, ...]]] = None) -> ArrayLike:
        return self.generator.standard_normal(size)

    def integers(self, high: int, size: Optional[Union[int, Tuple[int, ...]]] = None) -> ArrayLike:
        return self.generator.integers(0, high, size=size)

    def permutations(self, n: int, d: int) -> np.ndarray:
        return np.argsort(self.generator.random((n, d)), axis=1)


class WeibullParams:
    """Shape of a Weib(alpha, 1) law; scale is fixed at one."""

    def __init__(self, alpha: float) -> None:
        _checkShape(alpha)
        self.alpha: float = float(alpha)

    @property
    def heavyTailed(self) -> bool:
        return self.alpha < HEAVY_TAIL_SHAPE

    def __repr__(self) -> str:
        return f"WeibullParams(alpha={self.alpha})"


def _checkShape(alpha: float) -> None:
    if not (alpha > 0.0) or not math.isfinite(alpha):
        raise DomainError(f"Weibull shape must be positive and finite, got {alpha}")


def log_weibull_tail(alpha: float, x: ArrayLike) -> ArrayLike:
    """
    **Description**
    Log of the Weib(alpha, 1) survival function, -x**alpha. Stays finite where the linear tail underflows.

    **Params**
    - `alpha`: float, shape > 0.
    - `x`: float or array, points >= 0.

    **Returns**
    - float or array, log P(X >= x).
    """
    _checkShape(alpha)
    values = np.asarray(x, dtype=float)
    if np.any(values < 0) or np.any(np.isnan(values)):
        raise DomainError("Weibull tail is defined for x >= 0 only")
    out = -np.power(values, alpha)
    return float(out) if np.ndim(out) == 0 else out


def weibull_tail(alpha: float, x: ArrayLike) -> ArrayLike:
    """
    **Description**
    Survival function exp(-x**alpha) of Weib(alpha, 1); monotone non-increasing, values in (0, 1]
    until double precision underflows.

    **Params**
    - `alpha`: float, shape > 0.
    - `x`: float or array, points >= 0.

    **Returns**
    - float or array, P(X >= x).
    """
    out = np.exp(log_weibull_tail(alpha, x))
    return float(out) if np.ndim(out) == 0 else out


def weibull_quantile(alpha: float, u: ArrayLike) -> ArrayLike:
    """Inverse transform (-ln u)**(1/alpha) for u in (0, 1]."""
    _checkShape(alpha)
    out = np.power(-np.log(u), 1.0 / alpha)
    return float(out) if np.ndim(out) == 0 else out


def weibull_sample(
    alpha: float,
    rng: RandomStream,
    size: Optional[Union[int, Tuple[int, ...]]] = None
) -> ArrayLike:
    """
    **Description**
    Draw Weib(alpha, 1) variates by inverse transform, X = (-ln U)**(1/alpha).

    **Params**
    - `alpha`: float, shape > 0.
    - `rng`: RandomStream, the stream to consume.
    - `size`: optional output shape; a scalar is returned when omitted.

    **Returns**
    - float or array of non-negative variates.
    """
    return weibull_quantile(alpha, rng.uniform(size))


def _checkInterval(a: ArrayLike, b: float) -> None:
    lower = np.asarray(a, dtype=float)
    if np.any(lower < 0) or np.any(np.isnan(lower)):
        raise DomainError("truncation lower bound must be >= 0")
    if np.any(lower >= b):
        raise DomainError(f"truncation interval is empty: need a < b, got b={b}")


def truncated_weibull_quantile(alpha: float, a: ArrayLike, b: float, u: ArrayLike) -> ArrayLike:
    """
    **Description**
    Inverse transform of Weib(alpha, 1) truncated to [a, b). The exponent a**alpha - b**alpha is formed
    directly (never exp(-b**alpha) / exp(-a**alpha)) so very large thresholds do not underflow.

    **Params**
    - `alpha`: float, shape > 0.
    - `a`: float or array, lower bound(s) >= 0.
    - `b`: float, upper bound, may be `math.inf`.
    - `u`: float or array, uniforms; in [0, 1) for finite `b`, in (0, 1] for infinite `b`.

    **Returns**
    - float or array in [a, b).
    """
    _checkShape(alpha)
    _checkInterval(a, b)
    lowerPow = np.power(np.asarray(a, dtype=float), alpha)
    if math.isinf(b):
        out = np.power(lowerPow - np.log(u), 1.0 / alpha)
    else:
        # 1 - exp(a^alpha - b^alpha), computed without cancellation
        mass = -np.expm1(lowerPow - b ** alpha)
        out = np.power(lowerPow - np.log1p(-np.asarray(u) * mass), 1.0 / alpha)
        # rounding at u -> 1 may land exactly on b
        out = np.minimum(out, np.nextafter(b, 0.0))
        out = np.maximum(out, np.asarray(a, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def truncated_weibull_sample(
    alpha: float,
    a: ArrayLike,
    b: float,
    rng: RandomStream,
    size: Optional[Union[int, Tuple[int, ...]]] = None
) -> ArrayLike:
    """
    **Description**
    Draw Weib(alpha, 1) truncated to [a, b) with the inverse-transform method for truncated laws.

    **Params**
    - `alpha`: float, shape > 0.
    - `a`: float or array, lower bound(s) >= 0.
    - `b`: float, upper bound (may be `math.inf`).
    - `rng`: RandomStream.
    - `size`: optional output shape; defaults to the shape of `a`.

    **Returns**
    - float or array in [a, b).
    """
    if size is None and np.ndim(a) > 0:
        size = np.shape(a)
    u = rng.uniform(size) if math.isinf(b) else rng.standard_uniform(size)
    return truncated_weibull_quantile(alpha, a, b, u)


def exp_quantile(u: ArrayLike) -> ArrayLike:
    out = -np.log(u)
    return float(out) if np.ndim(out) == 0 else out


def exp_sample(rng: RandomStream, size: Optional[Union[int, Tuple[int, ...]]] = None) -> ArrayLike:
    """Exp(1) variates, -ln U with U in (0, 1]."""
    return exp_quantile(rng.uniform(size))


def weibull_cdf_interval(alpha: float, a: float, b: float, x: Sequence[float]) -> np.ndarray:
    """CDF of the [a, b)-truncated Weib(alpha, 1) law at `x`, used by goodness-of-fit checks."""
    _checkShape(alpha)
    values = np.clip(np.asarray(x, dtype=float), a, b)
    lowerPow = a ** alpha
    upperMass = 1.0 if math.isinf(b) else -math.expm1(lowerPow - b ** alpha)
    return -np.expm1(lowerPow - np.power(values, alpha)) / upperMass
