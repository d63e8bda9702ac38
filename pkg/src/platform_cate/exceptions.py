"""Exception hierarchy.

Errors fall in three families that the command line maps to exit codes:
usage/configuration problems (1), data problems (2) and numerical problems (3).
"""


class PlatformCateError(Exception):
    """Base class for every error raised by the package."""

    exit_code = 1


class ConfigError(PlatformCateError):
    """Invalid run or scenario configuration."""

    exit_code = 1

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(PlatformCateError):
    exit_code = 2


class EmptyInputError(DataError):
    pass


class MissingColumnError(DataError):
    def __init__(self, column, available=()):
        self.column = column
        msg = f"missing column {column!r}"
        if available:
            msg += f" (available: {', '.join(available)})"
        super().__init__(msg)


class ParseError(DataError):
    def __init__(self, row, column, value, reason="not numeric"):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"row {row}, column {column!r}: cannot parse {value!r} ({reason})")


class StructureError(DataError):
    """A dataset violates the platform-trial structural constraints."""

    def __init__(self, violations):
        self.violations = list(violations)
        shown = "; ".join(self.violations[:5])
        more = f" (+{len(self.violations) - 5} more)" if len(self.violations) > 5 else ""
        super().__init__(f"invalid trial dataset: {shown}{more}")


class EmptyConcurrentSetError(DataError):
    pass


class EmptyArmError(DataError):
    pass


class EmptySubsetError(DataError):
    pass


class PoolingTestUndefinedError(DataError):
    pass


class NumericError(PlatformCateError):
    exit_code = 3


class SingularDesignError(NumericError):
    def __init__(self, column, label=""):
        self.column = column
        where = f" in {label}" if label else ""
        super().__init__(f"design matrix is rank deficient{where}: column {column!r} is linearly dependent")


class DegenerateTargetError(NumericError):
    pass


class SeparationError(NumericError):
    pass


class PositivityError(NumericError):
    def __init__(self, rows, eps):
        self.rows = list(rows)
        shown = ", ".join(str(r) for r in self.rows[:10])
        more = ", ..." if len(self.rows) > 10 else ""
        super().__init__(
            f"fitted propensities outside ({eps:g}, {1 - eps:g}) at rows {shown}{more}"
        )


class SingularJacobianError(NumericError):
    pass


class StudyFailureError(NumericError):
    pass
