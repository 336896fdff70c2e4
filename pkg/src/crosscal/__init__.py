"""LiDAR-camera extrinsic calibration toolkit."""

__version__ = "0.1.0"

from .geometry import (
    CameraIntrinsics,
    DeviationRange,
    PointCloud,
    Quaternion,
    SE3Transform,
)

__all__ = [
    "CameraIntrinsics",
    "DeviationRange",
    "PointCloud",
    "Quaternion",
    "SE3Transform",
    "__version__",
]
