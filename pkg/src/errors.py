"""
Exception types for the CoCAI pipeline.

Every error carries the exit code the CLI maps it to:
- 2: configuration problems (bad flags, schema, target spec)
- 1: runtime problems (parsing, fitting, calibration, numerics)
"""


class CocaiError(Exception):
    """Base class for all pipeline errors."""
    exit_code = 1


class ConfigError(CocaiError):
    exit_code = 2


class SchemaError(CocaiError):
    exit_code = 2


class SpecError(CocaiError):
    exit_code = 2


class ParseError(CocaiError):
    """Malformed input row. `line` is the 1-based line number in the file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(CocaiError):
    pass


class SplitError(CocaiError):
    pass


class FitError(CocaiError):
    pass


class ContractError(CocaiError):
    pass


class CalibrationError(CocaiError):
    pass


class DomainError(CocaiError):
    pass


class NumericError(CocaiError):
    pass


class DegenerateIntervalError(CocaiError):
    pass


class BundleError(CocaiError):
    pass
