"""Exception hierarchy shared across the package.

Validation problems (bad inputs, malformed files, inconsistent configs) and
runtime problems (I/O, diverged training) are kept in separate branches so the
CLI can map them to distinct exit codes.
"""


class SrlfError(Exception):
    """Base class for all package errors."""


class ValidationError(SrlfError):
    """Input data or configuration violates a documented contract."""


class ConfigError(ValidationError):
    """Malformed or inconsistent configuration."""


class IngestionError(ValidationError):
    """Dataset files missing or unreadable during manifest construction."""


class StoreError(SrlfError):
    """Embedding store failure."""


class DuplicateKeyError(StoreError):
    """A key was written twice to the same store."""


class DimensionMismatchError(StoreError):
    """Vector length disagrees with the store's embedding dimension."""


class IntegrityError(StoreError):
    """Checksum mismatch or truncated store file."""


class EncoderError(SrlfError):
    """Embedding backend failure."""


class EncoderInitError(EncoderError):
    """Backend could not be initialized (weights unavailable, bad config)."""


class DecodeError(EncoderError):
    """Frame pixels could not be decoded or are malformed."""


class TrainingDivergedError(SrlfError):
    """Loss became non-finite; carries diagnostics for the failing step."""

    def __init__(self, message: str, epoch: int, batch_index: int, lr_trace: list[float]):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index
        self.lr_trace = lr_trace
