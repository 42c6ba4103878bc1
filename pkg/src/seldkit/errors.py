"""Exception hierarchy shared by all modules."""


class SeldError(Exception):
    """Base class for toolkit errors."""


class ValidationError(SeldError, ValueError):
    """Invalid user input: bad config field, out-of-range value, malformed file."""


class ShapeError(ValidationError):
    pass


class ConstraintError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class WavFormatError(ValidationError):
    pass


class UnsupportedEncodingError(WavFormatError):
    pass


class EmptyWaveformError(WavFormatError):
    pass


class MetadataError(ValidationError):
    pass


class SceneSpecError(ValidationError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class UndefinedResultError(ValidationError):
    pass


class TrainingError(SeldError, ArithmeticError):
    """Raised when filter fitting diverges; carries the trace up to the failure."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []
