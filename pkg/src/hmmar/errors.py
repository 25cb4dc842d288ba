"""Exception hierarchy shared by every hmmar module."""


class HmMarError(Exception):
    """Base class for all hmmar errors."""


class InvalidInputError(HmMarError, ValueError):
    """Raised for malformed observations, parameters or model files."""


class InsufficientHistoryError(InvalidInputError):
    """Raised when a time index has fewer than ``p`` lagged observations behind it."""


class NumericalFailureError(HmMarError, ArithmeticError):
    """Raised when a computation cannot be carried out in floating point.

    Attributes
    ----------
    t : int or None
        1-based time index at which the failure happened, when meaningful.
    component : int or None
        1-based component index involved, when meaningful.
    """

    def __init__(self, message, t=None, component=None):
        super().__init__(message)
        self.t = t
        self.component = component


class SimulationDivergedError(NumericalFailureError):
    """Raised when a simulated path leaves the finite floating point range."""


class BudgetExceededError(HmMarError):
    """Raised by the enumeration oracle instead of approximating."""


class FitFailedError(HmMarError):
    """Raised when every EM restart failed; ``failures`` holds one message per restart."""

    def __init__(self, failures):
        self.failures = list(failures)
        lines = "\n".join(f"  restart {i}: {msg}" for i, msg in enumerate(self.failures))
        super().__init__(f"all {len(self.failures)} restarts failed:\n{lines}")
