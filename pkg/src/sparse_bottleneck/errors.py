"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: argument errors -> 2, data errors -> 3,
numeric faults -> 4.
"""


class SparseBottleneckError(Exception):
    """Base class for all errors raised by this package."""


class ArgumentError(SparseBottleneckError, ValueError):
    """Invalid argument or configuration value."""


class DataError(SparseBottleneckError):
    """Problem with input data."""


class AlignmentError(DataError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__("sample identifiers not shared by both views: " + ", ".join(self.missing))


class ParseError(DataError):
    def __init__(self, path, row, column, value):
        self.path, self.row, self.column, self.value = path, row, column, value
        super().__init__(f"{path}: row {row}, column {column!r}: cannot parse {value!r} as a number")


class SchemaError(DataError):
    """Malformed header, duplicate names or inconsistent shapes."""


class DegenerateError(DataError):
    """A sample or feature that cannot be normalized (zero depth, constant column, zero norm)."""


class DomainError(DataError):
    """Value outside the domain of an operation (negative counts, non-finite entries)."""


class NumericFault(SparseBottleneckError):
    """Training produced a non-finite value or a solver misbehaved."""

    def __init__(self, message, **context):
        self.context = context
        if context:
            message += " (" + ", ".join(f"{k}={v}" for k, v in context.items()) + ")"
        super().__init__(message)


class RankError(NumericFault):
    """Rank-deficient matrix where full rank is required."""


class SolverFault(NumericFault):
    """Loss increased during a descent method; indicates a bug."""


class EmptyModelError(SparseBottleneckError):
    """Model has no selected features."""


class ShapeError(ArgumentError):
    def __init__(self, what, expected, actual):
        self.expected, self.actual = expected, actual
        super().__init__(f"{what}: expected {expected}, got {actual}")


class ConvergenceWarning(UserWarning):
    """Iterative solver stopped at its iteration cap."""
