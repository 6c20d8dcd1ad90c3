"""Exception hierarchy shared across the package."""


class EvoMemError(Exception):
    """Base class for all package errors."""


class InvalidInput(EvoMemError, ValueError):
    pass


class InvalidEmbedding(EvoMemError, ValueError):
    pass


class MalformedOperation(EvoMemError, ValueError):
    """Model output did not start with a recognized operation prefix."""


class InvalidPrune(MalformedOperation):
    """A prune referenced display indices outside the current working set."""


class BackendError(EvoMemError, RuntimeError):
    pass


class InvalidStream(EvoMemError, ValueError):
    pass


class StreamAborted(EvoMemError, RuntimeError):
    """A stream stopped early; ``results`` holds what completed."""

    def __init__(self, message, results=None):
        super().__init__(message)
        self.results = list(results or [])


class SnapshotError(EvoMemError, ValueError):
    pass


class EmptyReport(EvoMemError, ValueError):
    pass


class UndefinedCorrelation(EvoMemError, ValueError):
    pass


class ConfigError(EvoMemError, ValueError):
    pass
