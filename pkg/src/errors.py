"""Exception types shared across the package."""


class CountESNError(Exception):
    """Base class for errors raised by countesn."""

    exit_code = 1


class ConfigError(CountESNError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class DataError(CountESNError, ValueError):
    """Panel data failed ingestion or validation."""

    exit_code = 3


class NumericalError(CountESNError, RuntimeError):
    """A fit or sampler produced non-finite or degenerate values."""

    exit_code = 4


class StageArtifactError(CountESNError, FileNotFoundError):
    """A pipeline stage was run before the stage it depends on."""

    exit_code = 5
