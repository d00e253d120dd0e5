"""
Exception and warning types for the FracSmith workbench
Numerical modules raise these so callers can tell workbench failures from built-in ones
"""

from typing import Any, List, Optional, Sequence


class WorkbenchError(Exception):
    """Root of every FracSmith error"""


class ArgumentError(WorkbenchError, ValueError):
    """Raised when an argument is malformed (empty grid, bad shape, unknown name)."""


class DomainError(WorkbenchError, ValueError):
    """Raised when an argument lies outside the mathematical domain of an operation."""


class PreconditionError(DomainError):
    """
    Raised when all arguments are valid but a stated precondition fails,
    e.g. a Lipschitz exponent not exceeding the order or a degenerate point matrix.
    """


class ConvergenceError(WorkbenchError):
    """
    Raised when a limiting process did not settle.

    The last approximation and the distance history stay attached so the
    caller can inspect them or decide to use the iterate anyway.
    """

    def __init__(
        self,
        message: str,
        distances: Optional[Sequence[float]] = None,
        epsilons: Optional[Sequence[float]] = None,
        iterate: Any = None,
    ):
        super().__init__(message)
        self.distances: List[float] = list(distances or [])
        self.epsilons: List[float] = list(epsilons or [])
        self.iterate = iterate


class QuadratureError(ConvergenceError):
    """Raised when the resolvent-integral quadrature for a fractional power did not settle."""

    def __init__(self, message: str, residual: float, panels: int):
        super().__init__(message, distances=[residual])
        self.residual = residual
        self.panels = panels


class ClusteringError(WorkbenchError):
    """Raised when Jordan chains cannot be extracted for an eigenvalue cluster."""

    def __init__(self, message: str, cluster: complex, residual: float):
        super().__init__(f"{message} (cluster {cluster:.6g}, residual {residual:.3e})")
        self.cluster = cluster
        self.residual = residual


class DivergenceError(WorkbenchError):
    """Raised when series blocks stop being summable within the allowed budget."""

    def __init__(self, message: str, partial_sums: Sequence[float]):
        super().__init__(message)
        self.partial_sums = list(partial_sums)


class SeriesOverflowError(WorkbenchError):
    """Raised when truncated power-series arithmetic overflows even after rescaling."""


class TailTruncationWarning(UserWarning):
    """The neglected tail of a time integral could not be bounded to the requested accuracy."""
