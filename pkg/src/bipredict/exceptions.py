"""Exception hierarchy shared across the package."""


class BipredictError(Exception):
    """Base class for all errors raised by bipredict."""


class InsufficientDataError(BipredictError, ValueError):
    """Too few observations for the requested statistic."""


class UndefinedStatisticError(BipredictError, ValueError):
    """Statistic is undefined for the input, e.g. zero variance."""


class ConvergenceError(BipredictError, ArithmeticError):
    """An iterative numerical routine failed to converge."""


class ConversationError(BipredictError):
    """Invalid operation on a monitored conversation."""


class UnknownConversationError(ConversationError, KeyError):
    pass


class DuplicateConversationError(ConversationError):
    pass


class TurnOrderError(ConversationError):
    """A turn arrived with an index other than the next expected one."""


class TranscriptError(BipredictError, ValueError):
    """Malformed transcript record; carries the offending line number."""

    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class SnapshotError(BipredictError, ValueError):
    """State snapshot failed validation (version tag or checksum)."""
