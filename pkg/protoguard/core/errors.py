"""
Error hierarchy.

Every failure the toolkit detects on purpose derives from ``ProtoGuardError``
so the CLI can tell a rejected input apart from a bug.
"""


class ProtoGuardError(Exception):
    """Base class for expected failures."""


class ConfigurationError(ProtoGuardError, ValueError):
    """A configuration value or combination is invalid."""


class DimensionError(ProtoGuardError, ValueError):
    """Operand shapes are incompatible."""

    def __init__(self, message: str, *shapes: tuple[int, ...]) -> None:
        if shapes:
            rendered = " vs ".join(str(tuple(shape)) for shape in shapes)
            message = f"{message}: {rendered}"
        super().__init__(message)
        self.shapes = shapes


class ContractError(ProtoGuardError, ValueError):
    """A precondition of an operation does not hold."""


class DegenerateInputError(ProtoGuardError, ValueError):
    """The input lies where the operation is undefined (e.g. a zero vector)."""


class NumericalError(ProtoGuardError, ArithmeticError):
    """A computation produced NaN or Inf."""


__all__ = [
    "ProtoGuardError",
    "ConfigurationError",
    "DimensionError",
    "ContractError",
    "DegenerateInputError",
    "NumericalError",
]
