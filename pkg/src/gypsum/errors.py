"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 1, raster/file problems
(EnviFormatError, OSError) -> 2, NumericalError -> 3.
"""


class GypsumError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(GypsumError):
    """A run configuration is inconsistent or refers to invalid settings."""


class EnviFormatError(GypsumError):
    """A raster file or its header is malformed or inconsistent."""


class NumericalError(GypsumError):
    """A numerical procedure failed (divergence, degenerate inputs, ...)."""


class MetricUndefinedError(GypsumError):
    """A cluster-validity score is undefined for the given partition."""


class StageFailure(GypsumError):
    """Wraps an error so the pipeline can report which stage failed."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
