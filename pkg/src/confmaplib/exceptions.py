"""Custom exceptions for confmaplib

Input problems derive from `InputError` (also a `ValueError`), recoverable
numerical status from `SolverError`. The CLI maps the first family to exit
code 2 and the second to exit code 3.
"""

from typing import Any, Optional


class ConfmapError(Exception):
    """Base class for every error raised by confmaplib
    """
    pass


class InputError(ConfmapError, ValueError):
    """Arguments violate a documented precondition (dims, ranges, kinds)
    """
    pass


class FormatError(InputError):
    """A PGM or CMG1 file could not be decoded
    """
    pass


class MetricUndefinedError(ConfmapError):
    """A metric is undefined for the given input, e.g. surface distances
    on an empty mask
    """
    pass


class SolverError(ConfmapError):
    """Recoverable numerical status. The caller decides what to do with
    the partial result attached to the exception.
    """
    pass


class ConvergenceError(SolverError):
    """Conjugate gradient did not reach the tolerance within max_iter

    Attributes
    ----------
    x : numpy.ndarray
        The best iterate (lowest residual seen).
    stats : SolverStats
        Iteration count and final relative residual.
    """
    def __init__(self, msg: str, x: Any, stats: Any) -> None:
        super().__init__(msg)
        self.x = x
        self.stats = stats


class PartialMapError(ConvergenceError):
    """A confidence map solve did not converge

    Attributes
    ----------
    partial : ConfidenceMap
        Map assembled from the best iterate.
    slice_index : int or None
        The volume slice that failed, if any.
    """
    def __init__(
        self,
        msg: str,
        x: Any,
        stats: Any,
        partial: Any,
        slice_index: Optional[int] = None
    ) -> None:
        super().__init__(msg, x, stats)
        self.partial = partial
        self.slice_index = slice_index


class CensoredWalksError(SolverError):
    """Too many Monte-Carlo walks hit max_steps before absorption

    Attributes
    ----------
    estimate : ConfidenceMap
        Estimate computed from the uncensored walks.
    censored : int
        Total number of censored walks.
    total : int
        Total number of walks simulated.
    """
    def __init__(self, msg: str, estimate: Any, censored: int, total: int) -> None:
        super().__init__(msg)
        self.estimate = estimate
        self.censored = censored
        self.total = total


class TrainingDivergedError(SolverError):
    """Training produced a non-finite loss

    Attributes
    ----------
    history : list of float
        Epoch losses up to and including the failing epoch.
    """
    def __init__(self, msg: str, history: list) -> None:
        super().__init__(msg)
        self.history = history
