"""Exception hierarchy shared by all modules."""


class CollabInferError(Exception):
    pass


class InvalidInputError(CollabInferError, ValueError):
    """Malformed numeric or structural input."""


class InvalidParameterError(CollabInferError, ValueError):
    """A parameter violates its documented invariant."""


class UsageError(CollabInferError, RuntimeError):
    """An API was called in a state that does not allow it."""


class AlignmentError(CollabInferError, ValueError):
    """Two segmentations do not describe the same word sequence."""


class ConfigError(CollabInferError, ValueError):
    """Bad experiment or tier configuration.

    ``line`` is the 1-based line in the source file when known.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingTraceError(CollabInferError, KeyError):
    pass


class TraceMismatchError(CollabInferError, ValueError):
    """Replayed input tokens differ from the recorded ones."""


class TierError(CollabInferError):
    """Backend failure annotated with the tier it happened at."""

    def __init__(self, tier, cause):
        self.tier = tier
        self.cause = cause
        super().__init__(f"tier {tier}: {cause}")
