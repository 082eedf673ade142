"""Exception hierarchy shared by every module of the toolkit.

All domain errors derive from DefenceError and, except StateError, from
ValueError as well, so callers written against plain ValueError keep working.
File-system problems are reported with the built-in OSError family.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Union


class DefenceError(Exception):
    """Base class for every error raised by the toolkit."""


class DimensionError(DefenceError, ValueError):
    """Array or image sizes do not match what an operation expects."""


class ParameterError(DefenceError, ValueError):
    """A numeric parameter is outside its documented range."""


class BoundsError(DefenceError, ValueError):
    """A rectangle or window does not fit inside its image."""


class ImageFormatError(DefenceError, ValueError):
    """An image file is not a supported PGM or PNG."""


class ModelFormatError(DefenceError, ValueError):
    """A model or dump file has a bad magic, version or truncated payload."""


class DegenerateTransformError(DefenceError, ValueError):
    """An affine transform is singular and cannot be inverted."""


class DegenerateTrainingError(DefenceError, ValueError):
    """Training data does not contain both classes."""


class DegenerateLatticeError(DefenceError, ValueError):
    """Too few joints to estimate texel dimensions."""


class DegenerateFitError(DefenceError, ValueError):
    """Too few or collinear correspondences for a least-squares fit."""


class NoModelError(DefenceError, ValueError):
    """RANSAC could not find a consensus set of at least three matches."""


class DegenerateInputError(DefenceError, ValueError):
    """Input carries no usable observation at all."""


class CapacityError(DefenceError, ValueError):
    """An exact search would exceed its enumeration budget."""


class PatchSizeError(DefenceError, ValueError):
    """A training patch on disk has the wrong size."""

    def __init__(self, path: Union[str, Path], size: tuple[int, int], expected: int) -> None:
        self.path = Path(path)
        self.size = size
        super().__init__(
            f"{self.path}: patch is {size[0]}x{size[1]}, expected {expected}x{expected}"
        )


class RegistrationError(DefenceError, ValueError):
    """Registration of one frame against the reference failed."""

    def __init__(self, frame_index: int, reason: str, cause: Optional[Exception] = None) -> None:
        self.frame_index = frame_index
        self.cause = cause
        super().__init__(f"frame {frame_index}: {reason}")


class StateError(DefenceError, RuntimeError):
    """An operation was called without the state it depends on."""
