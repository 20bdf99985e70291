"""Trajectory extraction from stationary multi-LiDAR traffic recordings."""

from .config import OptimizationConfig, PipelineConfig, RegistrationConfig
from .core import (Frame, FrameMismatchError, PointCloud, PointColumns,
                   RigidTransform, ScanPattern, ScanPoint)

__version__ = "0.1.0"

__all__ = [
    "Frame",
    "FrameMismatchError",
    "OptimizationConfig",
    "PipelineConfig",
    "PointCloud",
    "PointColumns",
    "RegistrationConfig",
    "RigidTransform",
    "ScanPattern",
    "ScanPoint",
    "__version__",
]
