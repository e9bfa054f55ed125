"""Error taxonomy shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """Invalid configuration value or file."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class TrainingError(RuntimeError):
    """Training-loop failure surfaced to the caller (e.g. NaN loss)."""


class MetricError(ValueError):
    """Degenerate input to a distribution metric."""
