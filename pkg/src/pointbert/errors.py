"""Exception hierarchy shared by every subpackage."""


class PointBertError(Exception):
    pass


class ShapeError(PointBertError, ValueError):
    pass


class DomainError(PointBertError, ValueError):
    pass


class LabelError(PointBertError, ValueError):
    pass


class NumericsError(PointBertError, ArithmeticError):
    pass


class SizeError(PointBertError, ValueError):
    pass


class SimplexError(PointBertError, ValueError):
    pass


class RatioError(PointBertError, ValueError):
    pass


class NormError(PointBertError, ValueError):
    pass


class SpecError(PointBertError, ValueError):
    pass


class ConfigError(PointBertError, ValueError):
    """Invalid run configuration; ``key`` names the offending dotted path."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class CheckpointError(PointBertError, IOError):
    pass
