"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: :class:`DataError` subclasses exit 3,
:class:`NumericalError` exits 4.
"""


class FlexMoreError(Exception):
    """Base class for all package errors."""


class DataError(FlexMoreError):
    """Malformed or inconsistent input data."""


class ShapeError(DataError, ValueError):
    """Matrix dimensions do not line up."""


class NumericalError(FlexMoreError, ArithmeticError):
    """Non-finite values or an iteration that failed to converge."""


class FormatError(DataError):
    """Base for on-disk weight format problems."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


class InvariantError(DataError):
    """A structural invariant of a bundle, adapter or mixture is violated."""
