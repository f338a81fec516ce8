"""
Error hierarchy shared by every module of the package
"""
from typing import Optional


class ScaleFusionError(Exception):
    """Base class for all errors raised by the package"""


class ShapeError(ScaleFusionError, ValueError):
    """Shapes are not broadcastable, channels do not match, or an output would be empty"""


class NumericError(ScaleFusionError, ArithmeticError):
    """A value that must stay finite did not

    Args:
        message: Human readable description
        path: Canonical parameter path involved, when known
    """

    def __init__(self, message: str, path: Optional[str] = None):
        if path:
            message = f"{message} (parameter: {path})"
        super().__init__(message)
        self.path = path


class GradientError(ScaleFusionError, RuntimeError):
    """Backward was requested on something the tape cannot differentiate"""


class ConfigError(ScaleFusionError, ValueError):
    """Invalid configuration value

    Args:
        key: The offending configuration key
        message: What is wrong with it
    """

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class ConfigMismatchError(ConfigError):
    """A checkpoint was produced for a different model configuration"""


class DataError(ScaleFusionError, ValueError):
    """Dataset files are missing, undecodable or inconsistent"""


class CheckpointError(ScaleFusionError, IOError):
    """Checkpoint container is corrupted or of an unsupported version"""
