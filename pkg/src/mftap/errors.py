"""Exception types shared across the package."""

from __future__ import annotations


class ShapeError(ValueError):
    """Tensor or map dimensions do not fit an operation.

    ``axis`` names the offending axis (``"height"``, ``"channel"``, ...).
    """

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message)
        self.axis = axis


class FlowFormatError(ValueError):
    """A ``.flo`` file is malformed."""


class ImageFormatError(ValueError):
    """A PGM/PPM file is malformed."""


class CheckpointError(ValueError):
    """A checkpoint cannot be decoded or fails its checksum."""


class SpecValidationError(ValueError):
    """A synthetic scene description is invalid."""


class DegenerateLossError(RuntimeError):
    """No pixel received mass under the reverse warp; the step must be skipped."""


class NumericError(RuntimeError):
    """A NaN or infinity appeared during training or evaluation."""
