"""Exception hierarchy shared across the package.

Each class maps to one failure category surfaced by the CLI exit codes
(see cli.EXIT_*).
"""


class SkelrepError(Exception):
    """Base class for all package errors."""


class ShapeError(SkelrepError):
    """Operand shapes do not conform; message names both shapes."""


class ArgumentError(SkelrepError):
    """An argument violates a documented precondition."""


class StateError(SkelrepError):
    """An operation was invoked on an object in an invalid state."""


class ConfigError(SkelrepError):
    """A run configuration is incomplete or inconsistent."""


class SchemaError(ConfigError):
    """A structured document violates its published schema."""


class ParseError(SkelrepError):
    """A file could not be parsed; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(SkelrepError):
    """Dataset contents are unusable for the requested operation."""


class DegenerateBasisError(SkelrepError):
    """Reference joints are too close to span a coordinate basis."""


class NumericError(SkelrepError):
    """A numeric kernel produced or received non-finite values."""


class OracleError(NumericError):
    """The finite-difference oracle hit a non-finite evaluation."""
