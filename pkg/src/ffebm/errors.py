"""Exception hierarchy shared by every ffebm module."""


class FFEBMError(Exception):
    """Base class for all library errors."""


class DimensionError(FFEBMError, ValueError):
    pass


class StatisticsError(FFEBMError, ValueError):
    pass


class UsageError(FFEBMError, RuntimeError):
    pass


class CorruptionError(FFEBMError, IndexError):
    pass


class ConfigError(FFEBMError, ValueError):
    pass


class FormatError(FFEBMError, ValueError):
    pass


class DataError(FFEBMError, ValueError):
    pass


class PreconditionError(FFEBMError, RuntimeError):
    pass


class DivergenceError(FFEBMError, FloatingPointError):
    """Raised when a relaxation or adjoint pass leaves the finite range.

    ``step`` is the iteration at which it happened, ``block`` the EB block
    index (when known) and ``beta`` the signed nudging strength in use.
    """

    def __init__(self, message, step=None, block=None, beta=None):
        super().__init__(message)
        self.step = step
        self.block = block
        self.beta = beta

    def __str__(self):
        parts = [super().__str__()]
        if self.block is not None:
            parts.append(f"block={self.block}")
        if self.beta is not None:
            parts.append(f"beta={self.beta:+g}")
        if self.step is not None:
            parts.append(f"step={self.step}")
        return " ".join(parts)
