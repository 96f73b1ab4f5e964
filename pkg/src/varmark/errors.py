class VarmarkError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(VarmarkError, ValueError):
    """Tensor dimensions do not satisfy an operation's precondition."""


class ConfigError(VarmarkError, ValueError):
    """A configuration value is outside its valid range."""


class NonFiniteLossError(VarmarkError, RuntimeError):
    """A loss term became NaN or infinite.

    ``last_good`` points to the most recent checkpoint written before the failure
    (``None`` if nothing was saved yet).
    """

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good
