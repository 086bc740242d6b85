"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: config/contract problems -> 2,
data problems -> 3, numeric problems -> 4, I/O and file-format
problems -> 5.
"""


class LoraclError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(LoraclError):
    """Invalid run/model/training configuration."""


class ContractError(LoraclError):
    """A documented precondition was violated by the caller."""


class ShapeError(LoraclError):
    """Tensor shapes are incompatible for the requested operation."""


class AdapterError(LoraclError):
    """A low-rank adapter does not match the model it is applied to."""


class DataError(LoraclError):
    """Dataset contents violate the expected schema (labels, sizes)."""


class NumericError(LoraclError):
    """Non-finite values where finite ones are required."""


class StorageError(LoraclError):
    """Reading or writing a file failed at the OS level."""


class CheckpointError(StorageError):
    """Base for checkpoint file problems."""


class CheckpointFormatError(CheckpointError):
    """Corrupt or truncated checkpoint; message carries the byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written with an unsupported format version."""
