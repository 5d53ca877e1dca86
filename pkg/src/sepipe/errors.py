"""Exception types shared across the package."""


class SepipeError(Exception):
    pass


class ConfigError(SepipeError, ValueError):
    """A configuration value violates its documented constraint."""


class DimensionError(SepipeError, ValueError):
    """Array shapes are incompatible for an operation."""


class StateError(SepipeError, RuntimeError):
    """An object is used in a state that does not allow the call."""


class DataError(SepipeError):
    """Input data is missing, empty or unusable."""


class ParseError(DataError):
    """A file could not be parsed. ``offset`` is a byte offset or line number."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at {offset})"
        super().__init__(message)
        self.offset = offset
