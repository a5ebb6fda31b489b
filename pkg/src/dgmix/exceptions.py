"""Exception hierarchy shared across the package."""


class DGMixError(Exception):
    """Base class for all package errors."""


class ValidationError(DGMixError, ValueError):
    """An argument or configuration value is out of its allowed range."""


class ShapeError(ValidationError):
    """Array extents are incompatible with the requested operation."""


class NumericError(DGMixError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class UsageError(DGMixError, RuntimeError):
    """An API was called in the wrong state (stale cache, mismatched batch)."""


class IngestionError(DGMixError, OSError):
    """Base class for IDX corpus reading failures."""


class BadMagicError(IngestionError):
    pass


class TruncatedFileError(IngestionError):
    pass


class CountMismatchError(IngestionError):
    pass


class DataError(DGMixError, ValueError):
    """The dataset cannot satisfy a sampling request."""


class ConfigError(ValidationError):
    """Invalid or unknown configuration key."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class CheckpointError(DGMixError, OSError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TrainingDiverged(DGMixError, FloatingPointError):
    """Loss became non-finite; ``snapshot`` holds the offending iteration state."""

    def __init__(self, snapshot, detail=""):
        msg = "non-finite loss at iteration {iteration} (lr={lr:.6g}, loss_cls={loss_cls}, loss_dom={loss_dom})"
        super().__init__(msg.format(**snapshot) + (f": {detail}" if detail else ""))
        self.snapshot = snapshot
