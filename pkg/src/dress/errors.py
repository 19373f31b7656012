"""Exception hierarchy shared by every stage of the pipeline."""


class DressError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DressError, ValueError):
    """Shapes or extents are incompatible."""


class NumericError(DressError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(DressError, ValueError):
    """A configuration value is out of its valid range."""


class DataError(DressError, ValueError):
    """A corpus or split cannot satisfy the request."""


class FormatError(DressError, ValueError):
    """A checkpoint file is corrupt, truncated or of the wrong version."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class PreconditionError(DressError, RuntimeError):
    """An operation was invoked on state it refuses to handle."""
