"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes (2 usage, 3 numeric, 4 IO).
"""


class AttnGuideError(Exception):
    """Base class for all package errors."""


class ShapeError(AttnGuideError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(AttnGuideError, ValueError):
    """An argument is outside its admissible range."""


class ContractError(AttnGuideError, RuntimeError):
    """An operation was called in a state its contract forbids."""


class NumericError(AttnGuideError, ArithmeticError):
    """Non-finite or degenerate numbers were encountered."""


class UsageError(AttnGuideError):
    """Bad command-line input or configuration."""
