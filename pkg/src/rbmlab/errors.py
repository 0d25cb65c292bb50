"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: validation errors exit 2, numerical
failures exit 3, capacity refusals exit 4.
"""


class RbmLabError(Exception):
    """Base class for all package errors."""


class ValidationError(RbmLabError, ValueError):
    """Bad arguments, malformed configs, broken invariants on inputs."""


class CapacityError(RbmLabError):
    """Request exceeds a documented enumeration/memory budget; refuse, never truncate."""


class NumericalError(RbmLabError):
    """Quadrature blow-ups, singular systems after regularization, non-finite sums."""


class SolverError(NumericalError):
    """An iterative solver exhausted its budget without meeting tolerance."""


class DivergenceError(NumericalError):
    """An iteration produced non-finite state.

    Carries the last finite state when the caller provides one.
    """

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state
