"""Exception types shared across the package."""


class PMPError(Exception):
    """Base class for all errors raised by pmpnet."""


class DimensionError(PMPError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(PMPError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class ArgumentError(PMPError, ValueError):
    """An argument is outside its documented domain."""


class SolverError(PMPError, RuntimeError):
    """An iterative solver failed to terminate within its iteration cap."""


class FormatError(PMPError, ValueError):
    """A file has the wrong format, magic number or version."""


class ParseError(PMPError, ValueError):
    """A file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(PMPError, ValueError):
    """A run configuration failed schema validation."""


class TrainingAborted(PMPError, RuntimeError):
    """Training hit a non-finite loss; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class DegenerateInputError(ArgumentError):
    """Input has no extent (e.g. every point identical)."""
