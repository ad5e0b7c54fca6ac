from enum import Enum


class ErrorType(str, Enum):
    SHAPE = "shape"
    CONFIG = "config"
    DATA_FORMAT = "data_format"
    PARTITION = "partition"
    CHECKPOINT = "checkpoint"
    RUNTIME = "runtime"


class SNEError(Exception):
    error_type: ErrorType = ErrorType.RUNTIME

    def __init__(self, message: str, error_type: ErrorType | None = None):
        self.message = message
        if error_type is not None:
            self.error_type = error_type
        super().__init__(self.message)


class ShapeError(SNEError):
    error_type = ErrorType.SHAPE


class ConfigError(SNEError):
    error_type = ErrorType.CONFIG


class DataFormatError(SNEError):
    error_type = ErrorType.DATA_FORMAT


class PartitionError(SNEError):
    error_type = ErrorType.PARTITION


class CheckpointError(SNEError):
    error_type = ErrorType.CHECKPOINT


# errors caused by what the user passed in, reported with exit code 2
INPUT_ERRORS = (ConfigError, DataFormatError, PartitionError, ShapeError, CheckpointError)
