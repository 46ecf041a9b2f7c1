"""Exception hierarchy shared by every module."""


class LowRankServeError(Exception):
    pass


class ShapeError(LowRankServeError, ValueError):
    pass


class RankError(LowRankServeError, ValueError):
    pass


class NumericError(LowRankServeError, ArithmeticError):
    pass


class EmptyHistoryError(LowRankServeError, ValueError):
    pass


class CalibrationError(LowRankServeError):
    pass


class CheckpointFormatError(LowRankServeError):
    """Raised for malformed containers; ``field`` names the offending part."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class NormalizationError(LowRankServeError):
    def __init__(self, message, record=None):
        super().__init__(message if record is None else f"{record}: {message}")
        self.record = record


class CapacityError(LowRankServeError):
    pass


class ConfigurationError(LowRankServeError, ValueError):
    pass


class CaptureError(LowRankServeError):
    pass


class ReplayError(LowRankServeError):
    pass
