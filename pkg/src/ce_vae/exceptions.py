"""Custom exceptions for ce-vae."""

from typing import Optional


class CeVaeError(Exception):
    """Base exception for all ce-vae errors."""

    pass


class UsageError(CeVaeError):
    """Raised when an operation is called with invalid arguments or in the wrong order."""

    pass


class ShapeError(UsageError):
    """Raised when array shapes are incompatible."""

    pass


class BatchSizeError(UsageError):
    """Raised when batch norm is asked to train on a single sample."""

    pass


class MissingCacheError(UsageError):
    """Raised when a backward pass runs without a cached forward pass."""

    pass


class ConfigurationError(UsageError):
    """Raised when a configuration is invalid."""

    pass


class ConfigConflictError(ConfigurationError):
    """Raised when two configuration sources disagree (e.g. data vs. model size)."""

    pass


class ArchitectureError(ConfigurationError):
    """Raised when a network cannot be built for the requested geometry."""

    pass


class UnknownEstimatorError(ConfigurationError):
    """Raised when an estimator id is not registered."""

    pass


class MissingCheckpointError(ConfigurationError):
    """Raised when an estimator needs a trained model that was not supplied."""

    pass


class PlanParseError(ConfigurationError):
    """Raised when an experiment plan file cannot be parsed."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(CeVaeError):
    """Raised when a computation produces unusable numbers."""

    pass


class NonFiniteError(NumericalError):
    """Raised when a forward or backward pass produces NaN or Inf."""

    def __init__(self, message: str, layer_index: Optional[int] = None):
        self.layer_index = layer_index
        super().__init__(message)


class FactorizationError(NumericalError):
    """Raised when a Cholesky factorization fails."""

    def __init__(self, message: str, pivot: int, matrix_index: Optional[int] = None):
        self.pivot = pivot
        self.matrix_index = matrix_index
        super().__init__(message)


class CovarianceError(NumericalError):
    """Raised when covariance parameters are invalid (e.g. non-positive spectrum)."""

    pass


class TrainingAbortedError(NumericalError):
    """Raised when training hits a non-finite loss or gradient."""

    def __init__(self, message: str, epoch: int, batch: Optional[int] = None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(message)


class EstimationError(NumericalError):
    """Raised when an estimator fails on a specific sample."""

    def __init__(self, message: str, sample_index: Optional[int] = None):
        self.sample_index = sample_index
        super().__init__(message)


class DataError(CeVaeError):
    """Raised when dataset contents or files are invalid."""

    pass


class DatasetError(DataError):
    """Raised when a dataset violates its invariants."""

    pass


class FileFormatError(DataError):
    """Raised when a dataset or checkpoint file is malformed."""

    pass


class BadMagicError(FileFormatError):
    """Raised when a file does not start with the expected magic bytes."""

    pass


class UnsupportedVersionError(FileFormatError):
    """Raised when a file declares an unknown format version."""

    pass


class TruncatedPayloadError(FileFormatError):
    """Raised when a file ends before its declared payload."""

    pass
