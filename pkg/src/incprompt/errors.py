class ConfigError(ValueError):
    """Shapes, sizes or settings that cannot work together."""


class NumericError(ArithmeticError):
    """Non-finite values reached a numerical routine."""


class ProtocolError(RuntimeError):
    """The continual-learning protocol was violated (task order, data reuse)."""


class NoNegativeAvailable(LookupError):
    """Only the anchor task's key learner exists, so no hard negative can be mined."""
