"""Exceptions raised across the pipeline."""
from typing import Optional


class M2NetError(Exception):
    """Base class for all pipeline errors."""


class DimensionError(M2NetError, ValueError):
    """Array shapes or spatial sizes do not satisfy an operation's contract."""


class ImageFormatError(M2NetError):
    """A PNG file is not an 8-bit image with the expected channel count."""


class DatasetError(M2NetError):
    """A dataset sample could not be loaded or validated."""

    def __init__(self, message: str, sample_id: Optional[str] = None):
        self.sample_id = sample_id
        if sample_id is not None:
            message = f"sample {sample_id}: {message}"
        super().__init__(message)


class CheckpointError(M2NetError):
    """Checkpoint file is unreadable, from another format version, or incompatible."""


class DegenerateSplitError(M2NetError):
    """A patch split has no highlight patches or no background patches."""


class NonFiniteLossError(M2NetError):
    """A loss term became NaN or infinite during training."""

    def __init__(self, term: str, value: float, step: int):
        self.term = term
        self.value = value
        self.step = step
        super().__init__(f"non-finite loss term {term}={value} at step {step}")
