"""Shared exception types.

Overflow in numeric ops raises the builtin FloatingPointError; everything
else uses one of the classes below so callers can distinguish bad inputs
(ValueError family) from bad state (RuntimeError family).
"""


class DimensionError(ValueError):
    """Array shapes do not satisfy an op's contract."""


class DomainError(ValueError):
    """A value is outside its documented domain (e.g. t not in [0,1])."""


class ContractError(ValueError):
    """A documented precondition was violated by otherwise well-typed input."""


class ConfigError(ValueError):
    """A configuration object is internally inconsistent or incompatible."""


class StateError(RuntimeError):
    """An object was used in a forbidden state (e.g. tape reused)."""


class CapacityError(RuntimeError):
    """An exact enumeration would exceed the allowed support size."""


class CorruptRecordError(RuntimeError):
    """A serialized record failed its integrity check."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
