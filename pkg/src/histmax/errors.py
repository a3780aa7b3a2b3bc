"""Exception types raised across the package."""


class EntmaxError(ValueError):
    """Base class for invalid inputs or parameters."""


class ParameterError(EntmaxError):
    pass


class EmptyRowError(EntmaxError):
    """Every entry of a score row is masked."""


class UnsupportedAlphaError(EntmaxError):
    pass


class BracketError(EntmaxError):
    """The supplied bracket does not straddle the root."""


class InvalidDistributionError(EntmaxError):
    pass


class AccumulatorOverflowError(EntmaxError):
    """A packed bin counter would wrap around."""


class SizeError(EntmaxError):
    pass


class TensorFormatError(EntmaxError):
    """Malformed tensor file; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
