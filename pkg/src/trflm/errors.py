"""Exception hierarchy shared by all trflm modules."""


class TrfError(Exception):
    """Base class for toolkit errors."""


class ConfigError(TrfError):
    pass


class ValidationError(TrfError, ValueError):
    pass


class CorpusError(TrfError):
    pass


class ModelFormatError(TrfError):
    """Raised for unreadable, truncated or corrupted model/checkpoint files."""


class OutOfSupportError(TrfError, ValueError):
    """A sentence length has zero prior probability (or exceeds the maximum length)."""

    def __init__(self, length, message=None):
        self.length = length
        super().__init__(message or f"sentence length {length} is outside the model support")


class BudgetExceededError(TrfError):
    pass


class DivergenceError(TrfError):
    """Training produced a non-finite update."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}
