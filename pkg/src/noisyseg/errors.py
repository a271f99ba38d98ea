"""Exception types raised across the toolkit."""


class ConfigurationError(ValueError):
    """Inconsistent network, threshold, or pipeline configuration."""


class UsageError(ValueError):
    """An operation was called on the wrong kind of input."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class DataExhaustionError(RuntimeError):
    """A curation stage removed every record."""


class ImageParseError(ValueError):
    """Malformed raster file.  ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
