"""Exception types shared across the package."""


class CrossDistilError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CrossDistilError):
    """Tensor shapes do not conform for the requested operation."""


class NumericError(CrossDistilError):
    """An operation produced a non-finite value."""


class UsageError(CrossDistilError):
    """An API was called in a way its contract forbids."""


class ConfigError(CrossDistilError):
    """A configuration value is outside its allowed range."""


class DataError(CrossDistilError):
    """A dataset file violates the expected schema."""


class DegenerateLabels(CrossDistilError):
    """A label subset required by a sampler is empty."""


class UndefinedMetricError(CrossDistilError):
    """The requested metric is undefined on the given inputs."""


class TrainingAborted(CrossDistilError):
    """Training stopped because a loss became non-finite."""
