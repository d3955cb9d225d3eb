"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 2, data/shape/format
errors -> 3, TrainingError -> 4.
"""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PipelineError):
    """Invalid configuration value or CLI usage."""


class DataError(PipelineError):
    """Malformed or inconsistent input data."""


class SchemaError(DataError):
    """CSV header does not provide the requested channels."""


class RangeError(DataError):
    """A requested instant or index falls outside the data's range."""


class OrderingError(DataError):
    """Stream input arrived out of temporal order."""


class CalibrationError(DataError):
    """Threshold calibration received no reconstruction errors."""


class ShapeError(PipelineError):
    """Array dimensions do not match the expected shape."""


class FormatError(PipelineError):
    """Model checkpoint is corrupt or has an unsupported version."""


class InductionError(PipelineError):
    """Labeled dataset cannot be fit perfectly (not separable)."""


class TrainingError(PipelineError):
    """Training diverged (non-finite loss)."""
