"""Package-wide exception types.

The CLI maps `ValidationError` to exit code 2 and `NumericalError` to exit
code 3; everything else is a bug.
"""


class UnisepError(Exception):
    """Base class for package errors."""


class ValidationError(UnisepError):
    """Bad inputs: shapes, ranges, config keys, file formats."""


class ClippingError(ValidationError):
    """A waveform left the [-1, 1] range where that is contractually an error."""


class NumericalError(UnisepError):
    """Non-finite values where the computation contract forbids them."""
