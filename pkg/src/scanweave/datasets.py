"""Scan and trajectory file formats.

Scans are read from KITTI velodyne ``.bin`` files (little-endian float32
``x y z intensity`` records) or from CSV text with a ``x,y,z[,t]`` header.
Trajectories use the KITTI odometry layout: one row-major 3x4 ``[R|t]`` per
line, twelve space-separated numbers.
"""
from __future__ import annotations

import csv
import io
import math
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from .preprocess import RawScan
from .se3 import Pose, orthonormalize, ORTHO_TOL
from .simulation import SequenceSource

SCAN_SUFFIXES = (".bin", ".csv")
POSES_FILE = "poses.txt"


class FormatError(ValueError):
    """A scan or trajectory file does not follow its declared layout."""


def read_scan_kitti_bin(data: bytes) -> RawScan:
    if len(data) % 16:
        raise FormatError(f"KITTI scan length {len(data)} is not a multiple of 16 bytes")
    rec = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    return RawScan(rec[:, :3].astype(float))


def write_scan_kitti_bin(points, intensity: float = 0.0) -> bytes:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    rec = np.empty((pts.shape[0], 4), dtype="<f4")
    rec[:, :3] = pts
    rec[:, 3] = intensity
    return rec.tobytes()


def read_scan_csv(text: str) -> RawScan:
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise FormatError("CSV scan has no header")
    header = [c.strip().lower() for c in rows[0]]
    if header not in (["x", "y", "z"], ["x", "y", "z", "t"]):
        raise FormatError(f"CSV header must be x,y,z[,t], got {','.join(header)}")
    width = len(header)
    vals = np.empty((len(rows) - 1, width))
    for ln, row in enumerate(rows[1:], 2):
        if len(row) != width:
            raise FormatError(f"line {ln}: expected {width} fields, got {len(row)}")
        try:
            vals[ln - 2] = [float(c) for c in row]
        except ValueError:
            raise FormatError(f"line {ln}: non-numeric cell in {row!r}") from None
    if not np.all(np.isfinite(vals)):
        raise FormatError("CSV scan contains non-finite values")
    ts = None
    if width == 4:
        ts = vals[:, 3]
        if ts.size and (ts.min() < 0.0 or ts.max() > 1.0):
            raise FormatError("timestamp column t must lie in [0, 1]")
    return RawScan(vals[:, :3], ts)


def write_scan_csv(scan: RawScan) -> str:
    out = io.StringIO()
    ts = scan.timestamps
    out.write("x,y,z,t\n" if ts is not None else "x,y,z\n")
    for k, p in enumerate(scan.points):
        cells = [repr(float(v)) for v in p]
        if ts is not None:
            cells.append(repr(float(ts[k])))
        out.write(",".join(cells) + "\n")
    return out.getvalue()


def synthesize_timestamps(points) -> np.ndarray:
    """Sweep time from azimuth: ``atan2(y, x)`` mapped from ``[-pi, pi]`` to ``[0, 1]``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    az = np.arctan2(pts[:, 1], pts[:, 0])
    return np.clip((az + math.pi) / (2 * math.pi), 0.0, 1.0)


def read_scan(path, synth_timestamps: bool = False) -> RawScan:
    path = Path(path)
    if path.suffix == ".bin":
        scan = read_scan_kitti_bin(path.read_bytes())
    elif path.suffix == ".csv":
        scan = read_scan_csv(path.read_text())
    else:
        raise FormatError(f"unsupported scan format: {path.name}")
    if synth_timestamps and scan.timestamps is None:
        scan = RawScan(scan.points, synthesize_timestamps(scan.points), scan.frame_time)
    return scan


def _fmt(v: float) -> str:
    # repr round-trips exactly; integral values print without a trailing ".0"
    v = float(v) + 0.0
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def format_pose(pose: Pose) -> str:
    M = np.hstack([pose.R, pose.t[:, None]])
    return " ".join(_fmt(v) for v in M.ravel())


def write_trajectory(poses, path=None) -> str:
    """KITTI text for ``poses``; also written to ``path`` when given."""
    text = "".join(format_pose(p) + "\n" for p in poses)
    if path is not None:
        Path(path).write_text(text)
    return text


def parse_trajectory(text: str) -> list[Pose]:
    poses = []
    for ln, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        tok = line.split()
        if len(tok) != 12:
            raise FormatError(f"line {ln}: expected 12 values, got {len(tok)}")
        try:
            M = np.array([float(v) for v in tok]).reshape(3, 4)
        except ValueError:
            raise FormatError(f"line {ln}: non-numeric value") from None
        R = M[:, :3]
        # KITTI ground truth is printed with few digits
        if np.linalg.norm(R.T @ R - np.eye(3)) > ORTHO_TOL:
            R = orthonormalize(R)
        poses.append(Pose(R, M[:, 3]))
    return poses


def read_trajectory(path) -> list[Pose]:
    return parse_trajectory(Path(path).read_text())


class ScanFiles(Sequence):
    """Lazily loaded scans of a sequence directory, in lexicographic order."""

    def __init__(self, paths, synth_timestamps: bool = False):
        self.paths = list(paths)
        self.synth_timestamps = synth_timestamps

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, k):
        if isinstance(k, slice):
            return ScanFiles(self.paths[k], self.synth_timestamps)
        return read_scan(self.paths[k], self.synth_timestamps)


def list_scans(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"sequence directory not found: {directory}")
    return sorted(
        (p for p in directory.iterdir() if p.suffix in SCAN_SUFFIXES and p.is_file()),
        key=lambda p: p.name,
    )


def read_sequence(directory, max_range: float = 100.0, synth_timestamps: bool = False) -> SequenceSource:
    """Scans in ``directory`` plus ``poses.txt`` ground truth when present."""
    paths = list_scans(directory)
    if not paths:
        raise FormatError(f"no .bin or .csv scans in {directory}")
    gt_path = Path(directory) / POSES_FILE
    gt = read_trajectory(gt_path) if gt_path.is_file() else None
    return SequenceSource(ScanFiles(paths, synth_timestamps), gt, max_range)


def write_sequence(seq: SequenceSource, directory) -> list[Path]:
    """CSV scans ``000000.csv, ...`` and ``poses.txt`` (if ground truth exists)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(6, len(str(max(len(seq.scans) - 1, 0))))
    written = []
    for k, scan in enumerate(seq.scans):
        p = directory / f"{k:0{width}d}.csv"
        p.write_text(write_scan_csv(scan))
        written.append(p)
    if seq.ground_truth is not None:
        write_trajectory(seq.ground_truth, directory / POSES_FILE)
    return written


__all__ = [
    "FormatError", "read_scan_kitti_bin", "write_scan_kitti_bin", "read_scan_csv",
    "write_scan_csv", "synthesize_timestamps", "read_scan", "format_pose",
    "write_trajectory", "parse_trajectory", "read_trajectory", "ScanFiles",
    "list_scans", "read_sequence", "write_sequence", "POSES_FILE",
]
