"""
Error types shared across the restoration pipeline.

Every error derives from BFRError so callers (the CLI in particular) can map
families of failures onto stable exit codes.
"""

from typing import Optional


class BFRError(Exception):
    """Base class for all pipeline errors"""


class DimensionError(BFRError, ValueError):
    """Tensor or image shapes do not fit together"""


class ConfigurationError(BFRError, ValueError):
    """A configuration value or hyper-parameter is invalid"""


class UsageError(BFRError, ValueError):
    """An API was called outside its contract"""


class ImageReadError(BFRError, OSError):
    """An image file exists but cannot be decoded"""


class CheckpointFormatError(BFRError, ValueError):
    """A checkpoint file is truncated or malformed"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NaNLossError(BFRError, RuntimeError):
    """Training produced a non-finite loss"""

    def __init__(self, iteration: int, checkpoint_path: Optional[str] = None):
        message = f"Non-finite loss at iteration {iteration}"
        if checkpoint_path:
            message += f"; diagnostic checkpoint written to {checkpoint_path}"
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint_path = checkpoint_path
