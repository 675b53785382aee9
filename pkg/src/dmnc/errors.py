"""Exception types shared across the package."""


class DmncError(Exception):
    """Base class for all package errors."""


class DimensionError(DmncError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(DmncError, RuntimeError):
    """An API precondition was violated (e.g. writing to a protected memory)."""


class NonFiniteError(DmncError, ArithmeticError):
    """A primitive produced NaN or Inf."""


class DataError(DmncError, ValueError):
    """Input data is invalid (out-of-vocabulary index, bad record, ...)."""


class ParseError(DmncError, ValueError):
    """A data file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TrainingError(DmncError, RuntimeError):
    """Training cannot continue (non-finite gradients, config mismatch, ...)."""


class UsageError(DmncError, ValueError):
    """Command-line flags are malformed or out of range."""
