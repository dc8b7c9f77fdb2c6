"""Exception types shared across the package.

The CLI maps these onto exit codes: validation problems exit 2,
divergence exits 3 and I/O failures exit 4.
"""


class DJDAError(Exception):
    """Base class for all package errors."""


class ValidationError(DJDAError, ValueError):
    """Bad user input: labels out of range, invalid config, malformed files."""


class ShapeError(ValidationError):
    """Matrix dimensions do not line up."""


class ContractError(DJDAError, RuntimeError):
    """A caller broke an API precondition (stale cache, bad rate, ...)."""


class UndefinedMetricError(DJDAError, ValueError):
    """A metric was requested on input for which it is not defined."""


class DivergenceError(DJDAError, RuntimeError):
    """Training blew up. ``trajectory`` holds the epochs completed so far."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory
