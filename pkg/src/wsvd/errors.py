class ConfigError(ValueError):
    """Invalid configuration or inconsistent shapes."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or failed to converge."""
