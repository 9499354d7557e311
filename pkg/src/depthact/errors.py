"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(ArithmeticError):
    """NaN/Inf showed up where finite values are required."""


class FormatError(ValueError):
    """A serialized artifact (checkpoint, manifest, cache) is malformed
    or inconsistent with the current configuration."""


class ConfigError(ValueError):
    """An experiment config file is invalid (unknown or ill-typed key)."""
