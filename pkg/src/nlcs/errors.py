"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: input problems (``DomainError`` and
subclasses) give 2, ``DivergenceError`` gives 3 and ``BudgetError`` gives 4.
"""


class NlcsError(Exception):
    """Base class for all package errors."""


class DomainError(NlcsError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConstructionError(DomainError):
    """Instance parameters violate a required inequality."""


class PackingError(NlcsError):
    """Greedy packing could not place the minimum number of centers."""


class CapabilityError(NlcsError):
    """The oracle does not expose the requested capability."""


class ConvergenceError(NlcsError):
    """An iterative method stopped without meeting its tolerance.

    Attributes:
        estimate: best value reached before giving up.
    """

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate


class NumericError(NlcsError):
    """A numeric routine could not proceed (bracket failure and similar)."""


class BudgetError(NlcsError):
    """The projected amount of work exceeds the configured budget."""

    def __init__(self, message, projected=None, bound=None):
        super().__init__(message)
        self.projected = projected
        self.bound = bound


class DivergenceError(NlcsError):
    """A Langevin chain left the numerically safe region."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DegeneracyError(NlcsError):
    """Importance weights collapsed onto too few samples."""


class GridTooSmallError(NlcsError):
    """A quadrature box misses too much probability mass."""


class EvaluationError(NlcsError):
    """An oracle produced a non-finite value."""
