"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes; message names both shapes."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class DomainError(ValueError):
    """An input is outside the mathematical domain of an operation."""


class NumericalError(ArithmeticError):
    """A non-finite value was produced; message names the operation."""


class GenerationError(RuntimeError):
    """Synthetic-data generation failed after bounded retries."""
