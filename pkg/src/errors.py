"""Exception hierarchy shared by the pipeline stages."""

from pathlib import Path
from typing import Optional, Union


class OGGaussianError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 2


class ValidationError(OGGaussianError):
    """Inputs or configuration are invalid; nothing was written."""

    exit_code = 1


class RuntimeAbort(OGGaussianError):
    """A run started but could not finish."""

    exit_code = 2


class ConfigError(ValidationError):
    """Invalid configuration value."""


class ManifestError(ValidationError):
    """Scene or camera manifest is missing, malformed or inconsistent."""


class CameraError(ValidationError):
    """Camera intrinsics or clipping planes are invalid."""


class ShapeMismatchError(ValidationError, ValueError):
    """Two arrays that must share a shape do not."""


class DegenerateCovarianceError(ValidationError, ValueError):
    """Covariance is not usable (non-positive scale or ill-conditioned)."""


class GridFormatError(ValidationError):
    """An occupancy grid file could not be decoded."""

    def __init__(self, path: Union[str, Path], offset: int, message: str):
        self.path = Path(path)
        self.offset = offset
        super().__init__(f"{self.path}: byte offset {offset}: {message}")


class NonFiniteGradientError(RuntimeAbort):
    """A gradient contained NaN or Inf values."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter '{name}'")


class TrainingAborted(RuntimeAbort):
    """Training stopped on a non-finite loss or gradient."""

    def __init__(self, iteration: int, reason: str, checkpoint: Optional[Path] = None):
        self.iteration = iteration
        self.checkpoint = checkpoint
        message = f"training aborted at iteration {iteration}: {reason}"
        if checkpoint is not None:
            message += f" (last good checkpoint: {checkpoint})"
        super().__init__(message)
