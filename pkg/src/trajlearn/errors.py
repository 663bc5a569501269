"""Exception hierarchy shared by the library and the CLI.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericError`` -> 3.
"""


class TrajlearnError(Exception):
    """Base class for all library errors."""


class DataError(TrajlearnError):
    """Input data or files are malformed or inconsistent."""


class CorruptHeaderError(DataError):
    pass


class TruncatedPayloadError(DataError):
    pass


class ContainerError(DataError):
    """A tensor container failed validation on read."""


class GeometryError(DataError, ValueError):
    """Shapes or configured geometry do not fit together."""


class NumericError(TrajlearnError, ArithmeticError):
    """Optimization diverged or a matrix was numerically singular."""
