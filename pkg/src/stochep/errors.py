"""Exception hierarchy.

Exit codes used by the command-line harness are attached to the classes so
that the mapping lives next to the error it describes.
"""


class StochEPError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigInvalid(StochEPError, ValueError):
    exit_code = 2


class DimensionMismatch(StochEPError, ValueError):
    exit_code = 3


class NotNormalizable(StochEPError, ArithmeticError):
    """A Gaussian factor has no positive-definite precision/covariance."""

    exit_code = 4


class DegenerateInput(StochEPError, ValueError):
    exit_code = 3


class SkippedUpdate(StochEPError):
    """A site update was abandoned; the caller's state is untouched."""

    exit_code = 4


class ChainDiverged(StochEPError):
    exit_code = 4


class GridTooCoarse(StochEPError):
    exit_code = 4


class EmptyTestSet(StochEPError, ValueError):
    exit_code = 3


class ParseError(StochEPError, ValueError):
    exit_code = 3

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class SchemaError(StochEPError, ValueError):
    exit_code = 3


class MissingReference(StochEPError):
    exit_code = 3
