"""Exception hierarchy shared by every kdep module."""


class KdepError(Exception):
    """Base class for all library errors."""


class DimensionError(KdepError, ValueError):
    pass


class ShapeError(KdepError, ValueError):
    pass


class NumericError(KdepError, ArithmeticError):
    pass


class KindError(KdepError, TypeError):
    pass


class ParamError(KdepError, ValueError):
    pass


class MissingStatsError(KdepError, ValueError):
    pass


class SpecError(KdepError, ValueError):
    pass


class ConfigError(KdepError, ValueError):
    pass


class DegenerateError(KdepError, ValueError):
    pass


class IoError(KdepError, OSError):
    pass


class FormatError(KdepError, ValueError):
    """Malformed tensor container; ``offset`` is the byte where parsing failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
