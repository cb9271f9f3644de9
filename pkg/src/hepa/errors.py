"""Exception types raised across the package."""


class HepaError(Exception):
    """Base class for all package errors."""


class ShapeError(HepaError, ValueError):
    """Operand dimensions are incompatible."""


class ContractError(HepaError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigurationError(HepaError, ValueError):
    """A run cannot proceed with the given data/configuration."""


class LoadError(HepaError, ValueError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
