"""Error types raised by the localization toolkit."""
from typing import Optional

from config.constants import EXIT_ALGORITHM_FAILURE, EXIT_USAGE


class SurflocError(Exception):
    """Base error; exit_code is what the CLI returns for it."""

    exit_code = EXIT_ALGORITHM_FAILURE


# Geometry
class BehindCameraError(SurflocError):
    """Point has non-positive camera-frame depth."""


class InvalidDepthError(SurflocError):
    """Inverse depth is not strictly positive."""


class IllConditionedError(SurflocError):
    """Input sits on a singularity of the operation (e.g. rotation angle at pi)."""


class DegeneratePlaneError(SurflocError):
    """Plane passes through the camera center."""


class NoIntersectionError(SurflocError):
    """Viewing ray misses the plane or hits it behind the camera."""


# Map and input files
class MapFormatError(SurflocError):
    """Malformed map file."""

    exit_code = EXIT_USAGE

    def __init__(self, message: str, record: Optional[int] = None):
        self.record = record
        if record is not None:
            message = f"{message} (record {record})"
        super().__init__(message)


class MapBuildError(SurflocError):
    """Point cloud cannot produce a surfel map."""


class ImageReadError(SurflocError):
    """Image file missing or unreadable."""

    exit_code = EXIT_USAGE

    def __init__(self, message: str, frame_index: Optional[int] = None):
        self.frame_index = frame_index
        if frame_index is not None:
            message = f"Frame #{frame_index}: {message}"
        super().__init__(message)


class SceneError(SurflocError):
    """Invalid synthetic scene description."""

    exit_code = EXIT_USAGE


class ConfigError(SurflocError):
    """Invalid run configuration."""

    exit_code = EXIT_USAGE


# Localization
class InitializationError(SurflocError):
    """Not enough rendered map coverage to start."""


class TrackingLostError(SurflocError):
    """Frame alignment diverged."""

    def __init__(self, message: str, frame_index: Optional[int] = None):
        self.frame_index = frame_index
        if frame_index is not None:
            message = f"Frame #{frame_index}: {message}"
        super().__init__(message)


class OptimizationError(SurflocError):
    """Window optimization produced a non-finite energy."""


# Evaluation
class AlignmentError(SurflocError):
    """Trajectories cannot be aligned."""


class MetricError(SurflocError):
    """Metric undefined for the given trajectories."""


class TrajectoryFormatError(SurflocError):
    """Malformed trajectory file."""

    exit_code = EXIT_USAGE

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
