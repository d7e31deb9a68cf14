"""

Exception types shared by the samplers, estimators, the ELM engine and the harness.
Library code raises them; the harness turns them into row flags.
"""

from typing import Any, List, Optional


class ElmError(Exception):
    """Base class for every failure raised by this package."""


class DomainError(ElmError, ValueError):
    """A parameter lies outside the domain of the operation."""


class InfeasibleError(ElmError):
    """The requested support or constraint set is empty."""


class DisconnectedSupportError(ElmError):
    """
    **Description**
    The support graph of the density sequence is not connected, or a pooled sample has zero weight
    under every density.

    **Properties**
    - `components`: List[List[int]], the connected components of the support graph (if known).
    - `columns`: List[int], offending pooled-sample indices (if known).
    """

    def __init__(
        self,
        message: str,
        components: Optional[List[List[int]]] = None,
        columns: Optional[List[int]] = None
    ) -> None:
        super().__init__(message)
        self.components: List[List[int]] = components or []
        self.columns: List[int] = columns or []


class ConvergenceError(ElmError):
    """An iteration hit its cap; `lastIterate` keeps where it stopped."""

    def __init__(self, message: str, lastIterate: Any = None, iterations: int = 0) -> None:
        super().__init__(message)
        self.lastIterate = lastIterate
        self.iterations: int = iterations


class DegenerateEstimateError(ElmError):
    """The data cannot support an estimate (zero mean, zero likelihood ratio, unbounded solution)."""


class ConfigError(ElmError, ValueError):
    """An experiment configuration failed validation."""
