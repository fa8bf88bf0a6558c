class ScaleInjectError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(ScaleInjectError, ValueError):
    pass


class InfeasibleEmbeddingError(ScaleInjectError):
    """The payload cannot be reached within the deviation budget."""

    def __init__(self, message, worst_residual):
        super().__init__(f"{message} (worst residual {worst_residual:.4f})")
        self.worst_residual = worst_residual


class OracleError(ScaleInjectError):
    """Transport-level failure talking to the target model."""


class RateLimitError(OracleError):
    """Retries exhausted while the endpoint kept throttling."""

    def __init__(self, message, attempts):
        super().__init__(message)
        self.attempts = attempts


class ResponseParseError(ScaleInjectError):
    def __init__(self, message, raw):
        super().__init__(message)
        self.raw = raw


class ConfigError(ScaleInjectError, ValueError):
    pass


class PartialResultError(ScaleInjectError):
    """An operation failed midway; ``partial`` holds what completed."""

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial
