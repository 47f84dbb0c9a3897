"""Exception hierarchy shared by every stage of the search and evaluation pipeline."""


class NasError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(NasError):
    """A tensor or dataset shape violates an operation's contract."""


class NumericError(NasError):
    """A NaN or Inf appeared where finite values are required."""


class ContractError(NasError):
    """An operation was called outside its preconditions."""


class ConfigError(NasError):
    """A run configuration is invalid or inconsistent."""


class CheckpointError(NasError):
    """A checkpoint file could not be written or read back."""


class IngestionError(NasError):
    """A dataset file is malformed.

    Args:
        message: What went wrong.
        offset: Byte offset of the offending record, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class InitError(NasError):
    """Weights cannot be loaded into the requested architecture."""


class SearchDivergedError(NasError):
    """The search loss became non-finite; a diagnostic checkpoint was written."""

    def __init__(self, message: str, checkpoint_path: str | None = None):
        self.checkpoint_path = checkpoint_path
        super().__init__(message)
