"""Exception hierarchy shared across the package."""


class CPMGEEError(Exception):
    """Base class for all errors raised by cpmgee."""

    code = "E000"


class DomainError(CPMGEEError, ValueError):
    code = "E001"


class DatasetError(CPMGEEError, ValueError):
    code = "E100"


class ParseError(DatasetError):
    """Raised for malformed CSV input; carries the offending line number."""

    code = "E101"

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateKeyError(DatasetError):
    code = "E102"


class EmptyDatasetError(DatasetError):
    code = "E103"


class DegenerateResponseError(DatasetError):
    code = "E104"


class InvalidBinsError(DatasetError):
    code = "E105"


class ParameterError(CPMGEEError, ValueError):
    """Invalid parameter vector, e.g. intercepts that are not increasing."""

    code = "E200"


class RankDeficientError(CPMGEEError, ValueError):
    code = "E201"


class ConvergenceError(CPMGEEError, RuntimeError):
    """Iterative solver failed; ``partial`` holds the last iterate if any."""

    code = "E202"

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class SingularMatrixError(CPMGEEError, ArithmeticError):
    code = "E203"


class UnsupportedCombinationError(CPMGEEError, ValueError):
    code = "E300"


class LevelCapError(CPMGEEError, ValueError):
    code = "E301"


class AlphaRangeError(CPMGEEError, ValueError):
    code = "E302"


class ExtremeQuantileError(CPMGEEError, ValueError):
    code = "E400"


class DimensionError(CPMGEEError, ValueError):
    code = "E401"


class ConfigError(CPMGEEError, ValueError):
    """Invalid simulation config; ``path`` points at the offending field."""

    code = "E500"

    def __init__(self, message, path=""):
        self.path = path
        if path:
            message = f"{path}: {message}"
        super().__init__(message)
