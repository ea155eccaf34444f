"""Exception hierarchy shared by every module.

The CLI maps :class:`ValidationError` to exit code 1 and any other
:class:`MGFError` to exit code 2.
"""


class MGFError(Exception):
    """Base class for all errors raised by the package."""


class ValidationError(MGFError, ValueError):
    """Bad input: wrong shape, out-of-range argument, malformed file."""


class NumericError(MGFError, FloatingPointError):
    """A computation produced NaN/inf where a finite value was required."""


class CheckpointError(MGFError):
    """Checkpoint could not be read."""
