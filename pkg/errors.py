# errors.py
# Exception hierarchy shared by every module; main.py maps these to exit codes.


class ClipMgError(Exception):
    """Base class for all errors raised by this project."""

    exit_code = 1


class DimensionError(ClipMgError, ValueError):
    """Tensor shapes do not agree for the requested operation."""


class ContractError(ClipMgError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ClipMgError, ValueError):
    """An experiment or component configuration is invalid."""


class InputError(ClipMgError, ValueError):
    """Input data is empty or out of range."""


class PoseParseError(ClipMgError, ValueError):
    """A pose file could not be parsed."""

    def __init__(self, message, clip_id=None, frame_index=None):
        where = []
        if clip_id is not None:
            where.append(f"clip '{clip_id}'")
        if frame_index is not None:
            where.append(f"frame {frame_index}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.clip_id = clip_id
        self.frame_index = frame_index


class DatasetError(ClipMgError, OSError):
    """Dataset directory is missing, corrupt or has the wrong version."""


class NumericError(ClipMgError, ArithmeticError):
    """A forward value or loss became NaN/Inf."""

    exit_code = 2
