"""Exception types raised across the toolkit."""


class SnnbdError(Exception):
    """Base class for all toolkit errors."""


class TruncatedRecord(SnnbdError, ValueError):
    pass


class CoordinateOutOfBounds(SnnbdError, ValueError):
    pass


class InvalidGeometry(SnnbdError, ValueError):
    pass


class InvalidBias(SnnbdError, ValueError):
    pass


class NonPositiveLuminance(SnnbdError, ValueError):
    pass


class InvalidSize(SnnbdError, ValueError):
    pass


class OutOfRange(SnnbdError, ValueError):
    pass


class EmptyPool(SnnbdError, ValueError):
    pass


class EmptyDataset(SnnbdError, ValueError):
    pass


class ShapeMismatch(SnnbdError, ValueError):
    pass


class MixedShapes(SnnbdError, ValueError):
    pass


class ConfigError(SnnbdError, ValueError):
    """Invalid experiment configuration.

    ``fields`` maps each offending config key to a human-readable diagnostic.
    """

    def __init__(self, message, fields=None):
        self.fields = dict(fields or {})
        if self.fields:
            detail = "; ".join(f"{k}: {v}" for k, v in self.fields.items())
            message = f"{message} ({detail})"
        super().__init__(message)
