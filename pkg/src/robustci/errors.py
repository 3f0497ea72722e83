class RobustCIError(Exception):
    pass


class ConfigError(RobustCIError, ValueError):
    """Invalid configuration or parameter value."""


class UsageError(RobustCIError, ValueError):
    """Malformed call, e.g. mismatched dimensions."""


class DomainError(RobustCIError, ValueError):
    """Argument outside the mathematical domain of a function."""


class NumericalError(RobustCIError, RuntimeError):
    pass
