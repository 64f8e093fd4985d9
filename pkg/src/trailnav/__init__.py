"""Lidar teach-and-repeat navigation pipeline with a deterministic forest
simulator: point-to-plane registration constrained to translation + yaw,
IMU/odometry prior with scan deskewing, voxel-tiled mapping with dynamic-point
removal, an orthogonal-exponential path follower, and evaluation metrics."""

__version__ = "0.1.0"

from .config import GlobalConfig, load_config, save_config  # noqa: F401
from .geom import PointCloud, RigidTransform  # noqa: F401
