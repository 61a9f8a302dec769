"""Multi-keyframe lidar odometry on numpy/scipy.

Each scan is registered by robust point-to-point ICP against every keyframe
in a sliding window, and the resulting relative-pose constraints are fused
in a small pose graph.
"""
from .metrics import DESK_LENGTHS, KITTI_LENGTHS, RteReport, rte
from .odometry import FrameResult, Odometry, PipelineConfig
from .posegraph import Constraint, OptimizationError, PoseGraph
from .preprocess import DownsampledScan, RawScan, preprocess, voxel_downsample
from .registration import DegenerateGeometryError, SpatialIndex, icp
from .se3 import DegenerateRotationError, Pose

__version__ = "0.1.0"

__all__ = [
    "Pose", "DegenerateRotationError", "RawScan", "DownsampledScan", "preprocess",
    "voxel_downsample", "SpatialIndex", "icp", "DegenerateGeometryError", "PoseGraph",
    "Constraint", "OptimizationError", "Odometry", "PipelineConfig", "FrameResult",
    "rte", "RteReport", "KITTI_LENGTHS", "DESK_LENGTHS",
]
