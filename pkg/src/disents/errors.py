"""Exception taxonomy shared across the package.

ConfigError and ParseError signal bad user input (CLI exit code 2);
NumericError signals a numeric failure in an otherwise valid run (exit 3).
ShapeError and ContractError are programming-contract violations raised as
early as possible at call boundaries.
"""


class DisentsError(Exception):
    """Base class for all package errors."""


class ShapeError(DisentsError, ValueError):
    """Operands have incompatible or unexpected shapes."""


class ContractError(DisentsError, ValueError):
    """A documented call precondition was violated."""


class ConfigError(DisentsError, ValueError):
    """A configuration value is unknown, malformed, or out of range."""


class ParseError(DisentsError, ValueError):
    """An input file could not be parsed."""


class NumericError(DisentsError, ArithmeticError):
    """A computation produced or received non-finite values."""
