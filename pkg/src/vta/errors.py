"""Exception hierarchy shared by the library and the CLI."""


class VtaError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 2


class ValidationError(VtaError, ValueError):
    """Bad input or configuration; detected before any work is done."""

    exit_code = 1


class ConfigError(ValidationError):
    pass


class SchemaError(ValidationError):
    pass


class IngestionError(ValidationError):
    pass


class ParameterError(ValidationError):
    pass


class PrerequisiteError(ValidationError):
    """A stage was requested before the artifacts it depends on exist."""


class DivergenceError(VtaError, RuntimeError):
    """Training produced non-finite parameters or activations."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class UndefinedMetricError(VtaError, ArithmeticError):
    pass
