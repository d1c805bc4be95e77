# exceptions.py


class MeshRecoveryError(Exception):
    """Base class for errors raised by the mesh recovery pipeline"""

    def __init__(self, message="An error occurred"):
        self.message = message
        super().__init__(self.message)


class ConfigurationError(MeshRecoveryError):
    """Raised when a configuration or template topology is invalid."""

    def __init__(self, field, message=None):
        self.field = field
        if message is None:
            message = f"Invalid configuration value for {field}"
        super().__init__(message)


class DimensionError(MeshRecoveryError):
    """Raised when tensor shapes do not line up."""

    def __init__(self, expected, actual, message=None):
        self.expected = expected
        self.actual = actual
        if message is None:
            message = f"Expected shape {expected}, got {actual}"
        super().__init__(message)


class TimestepOutOfRangeError(MeshRecoveryError):
    """Raised when a diffusion timestep falls outside [0, T]."""

    def __init__(self, t, max_t, message=None):
        self.t = t
        self.max_t = max_t
        if message is None:
            message = f"Timestep {t} outside [0, {max_t}]"
        super().__init__(message)


class CheckpointFormatError(MeshRecoveryError):
    """Raised when a tensor container fails to parse or validate."""

    def __init__(self, path, message=None):
        self.path = path
        if message is None:
            message = f"Malformed tensor container: {path}"
        super().__init__(message)


class DatasetError(MeshRecoveryError):
    """Raised when a dataset directory is missing or inconsistent."""

    def __init__(self, path, message=None):
        self.path = path
        if message is None:
            message = f"Dataset at {path} is missing or inconsistent"
        super().__init__(message)
