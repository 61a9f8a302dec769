"""Scan deskewing and first-point-per-voxel downsampling."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import se3
from .se3 import Pose

DEFAULT_V_MAP = 0.5
DEFAULT_V_ICP = 1.5


@dataclass(frozen=True)
class RawScan:
    """One lidar sweep in the sensor frame.

    ``timestamps`` are per-point relative times in ``[0, 1]`` over the sweep,
    or ``None`` when the sensor does not provide them.
    """

    points: np.ndarray
    timestamps: np.ndarray | None = None
    frame_time: float = 0.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.timestamps is not None:
            ts = np.asarray(self.timestamps, dtype=float).reshape(-1)
            if ts.shape[0] != pts.shape[0]:
                raise ValueError(
                    f"{ts.shape[0]} timestamps for {pts.shape[0]} points"
                )
            if ts.size and (ts.min() < 0.0 or ts.max() > 1.0):
                raise ValueError("timestamps must lie in [0, 1]")
            object.__setattr__(self, "timestamps", ts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class DownsampledScan:
    points: np.ndarray
    source_voxel_size: float
    indices: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return self.points.shape[0]


def voxel_key(points, voxel_size: float) -> np.ndarray:
    """Integer voxel indices ``floor(p / v)`` per point, shape ``(N, 3)``."""
    return np.floor(np.asarray(points, dtype=float) / voxel_size).astype(np.int64)


def voxel_downsample(points, voxel_size: float) -> DownsampledScan:
    """Keep the first point (in input order) that falls into each voxel."""
    if voxel_size <= 0:
        raise ValueError("voxel size must be positive")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        return DownsampledScan(pts.copy(), voxel_size, np.zeros(0, dtype=np.int64))
    keys = voxel_key(pts, voxel_size)
    # np.unique returns the first occurrence of each distinct row
    _, first = np.unique(keys, axis=0, return_index=True)
    first.sort()
    return DownsampledScan(pts[first], voxel_size, first)


def deskew(scan: RawScan, motion: Pose) -> RawScan:
    """Undo intra-sweep motion, expressing every point at the end of the sweep.

    A point captured at relative time ``s`` is moved by
    ``interpolate(motion, s - 1)``, where ``motion`` is the inter-frame motion
    of the previous step.
    """
    if scan.timestamps is None or len(scan) == 0:
        return scan
    xi = se3.log(motion)
    if not np.any(xi):
        return scan
    offsets = scan.timestamps - 1.0
    # one pose per distinct timestamp; sweeps share times across rings
    uniq, inv = np.unique(offsets, return_inverse=True)
    T = se3.batch_exp(uniq[:, None] * xi[None, :])
    R = T[inv, :3, :3]
    t = T[inv, :3, 3]
    pts = np.einsum("nij,nj->ni", R, scan.points) + t
    return RawScan(pts, scan.timestamps, scan.frame_time)


def preprocess(
    scan: RawScan,
    motion: Pose,
    v_map: float = DEFAULT_V_MAP,
    v_icp: float = DEFAULT_V_ICP,
) -> tuple[DownsampledScan, DownsampledScan]:
    """Return ``(keyframe_cloud, registration_cloud)``.

    The registration cloud is a subset of the keyframe cloud, which is a
    subset of the deskewed input.
    """
    if v_icp < v_map:
        raise ValueError(f"v_icp ({v_icp}) must not be smaller than v_map ({v_map})")
    deskewed = deskew(scan, motion)
    K = voxel_downsample(deskewed.points, v_map)
    I = voxel_downsample(K.points, v_icp)
    return K, I
