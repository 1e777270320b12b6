"""Exception types raised across the package."""


class WordmineError(Exception):
    """Base class for all package errors."""


class EmptyInput(WordmineError, ValueError):
    pass


class DimensionMismatch(WordmineError, ValueError):
    pass


class ZeroVector(WordmineError, ValueError):
    pass


class MalformedQueryBank(WordmineError, ValueError):
    pass


class MissingGold(WordmineError, KeyError):
    pass


class ClassMismatch(WordmineError, ValueError):
    pass


class InsufficientPool(WordmineError, ValueError):
    """Raised when a sampler cannot draw enough items.

    ``side`` names the starved pool (e.g. ``"positives"``, ``"background"``).
    """

    def __init__(self, message, side=None):
        super().__init__(message)
        self.side = side


class ConfigError(WordmineError, ValueError):
    pass


class FormatError(WordmineError, ValueError):
    """A binary or JSON artifact does not match its declared layout."""


class StageError(WordmineError, RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
