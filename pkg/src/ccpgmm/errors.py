"""Exception hierarchy shared by the library and the CLI.

The CLI maps these onto exit codes: validation problems exit with 2,
numerical failures with 3 and I/O problems with 4.
"""


class CcpgmmError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(CcpgmmError, ValueError):
    """A parameter or input violates a documented precondition."""

    exit_code = 2


class LoadError(CcpgmmError):
    """An image, raster or archive could not be loaded."""

    exit_code = 4


class UnreadableFileError(LoadError):
    pass


class DimensionMismatchError(LoadError):
    pass


class NonFiniteValueError(LoadError):
    pass


class ConstraintError(ValidationError):
    """Malformed constraint document (bounds, overlap, unknown ids)."""


class NumericalError(CcpgmmError, ArithmeticError):
    exit_code = 3


class ComponentCollapseError(NumericalError):
    """A mixture component lost (almost) all of its posterior mass."""


class SingularMatrixError(NumericalError):
    pass


class InfeasibleConstraintsError(ValidationError):
    """No component assignment satisfies the negative constraints."""
