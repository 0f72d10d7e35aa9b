"""Shared exception types.

Every failure mode in the library maps onto one of these so callers (and the
CLI, which turns them into exit codes) can react without string matching.
"""


class DimensionError(ValueError):
    """Tensor/array shapes are incompatible for the requested operation."""


class ContractViolation(ValueError):
    """A documented precondition was violated by the caller."""


class ParameterError(ValueError):
    """An operator parameter is outside its valid range."""


class NumericError(RuntimeError):
    """A numeric procedure failed (solver non-convergence, NaN loss, ...)."""


class CacheInvalidError(RuntimeError):
    """An activation cache no longer matches the current input or weights."""


class RegistryError(KeyError):
    """Lookup of an unknown operator name."""
