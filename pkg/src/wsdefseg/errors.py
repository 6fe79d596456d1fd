class WSDefSegError(Exception):
    """Base class for every error raised by wsdefseg."""

    pass


class ShapeError(WSDefSegError):
    """Raised when tensor shapes or extents do not fit an operation."""

    pass


class NumericsError(WSDefSegError):
    """Raised when an operation produces NaN or Inf."""

    pass


class ConfigError(WSDefSegError):
    """Raised when a configuration or stage plan is invalid."""

    pass


class CheckpointError(WSDefSegError):
    """Raised when a checkpoint cannot be read or does not match the model."""

    pass


class DataError(WSDefSegError):
    """Raised when a sample or annotation is unusable."""

    pass


class FormatError(WSDefSegError):
    """Raised when a file on disk is malformed."""

    def __init__(self, path, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class IoError(WSDefSegError):
    """Raised when a file the manifest refers to is missing or unreadable."""

    pass


class UsageError(WSDefSegError):
    """Raised for command-line usage mistakes."""

    pass
