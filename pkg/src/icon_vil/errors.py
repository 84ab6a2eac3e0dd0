"""Exception hierarchy shared by every module."""


class IconError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateVector(IconError, ValueError):
    pass


class EmptyInput(IconError, ValueError):
    pass


class BadK(IconError, ValueError):
    pass


class BadLabel(IconError, ValueError):
    pass


class DimMismatch(IconError, ValueError):
    pass


class ShapeMismatch(DimMismatch):
    pass


class LengthMismatch(DimMismatch):
    pass


class BadConfig(IconError, ValueError):
    """Invalid configuration. ``path`` names the offending field when known."""

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ConfigError(BadConfig):
    pass


class BadKind(BadConfig):
    pass


class ParseError(IconError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DataCoverageError(IconError, ValueError):
    pass


class StaleCache(IconError, RuntimeError):
    pass


class NoCenters(IconError, RuntimeError):
    pass


class MissingGroup(IconError, KeyError):
    pass


class ZeroHistoryMean(IconError, ValueError):
    pass


class IncompleteMatrix(IconError, ValueError):
    pass


class EmptyList(IconError, ValueError):
    pass
