"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid parameters, budgets, sizes or split settings."""


class InputError(ValueError):
    """An array or dataset whose shape does not match the model."""


class NumericalError(ArithmeticError):
    """Non-finite values reached a computation that requires finite ones."""


class IngestionError(OSError):
    """Raw dataset files are missing or unreadable."""
