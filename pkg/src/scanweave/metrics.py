"""KITTI-style relative translational error over fixed path-length segments."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .se3 import Pose

KITTI_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)
DESK_LENGTHS = (10, 20, 30, 40, 50, 60, 70, 80)


@dataclass
class RteReport:
    lengths: list[float]
    translation_pct: dict[float, float]  # mean error per length, percent
    rotation_deg_per_m: dict[float, float]
    counts: dict[float, int]
    average_pct: float
    average_rot_deg_per_m: float
    segments: int
    empty: bool = False
    errors: list[tuple[int, float, float, float]] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "lengths": list(self.lengths),
            "translation_pct": {str(k): v for k, v in self.translation_pct.items()},
            "rotation_deg_per_m": {str(k): v for k, v in self.rotation_deg_per_m.items()},
            "counts": {str(k): v for k, v in self.counts.items()},
            "average_pct": self.average_pct,
            "average_rot_deg_per_m": self.average_rot_deg_per_m,
            "segments": self.segments,
            "empty": self.empty,
        }

    def table(self, name: str = "sequence") -> str:
        """Plain-text rows ``name  error%``, one per length plus the average."""
        rows = [f"{'sequence':<12}{'length':>8}{'error %':>10}"]
        for L in self.lengths:
            if self.counts.get(L):
                rows.append(f"{name:<12}{L:>8g}{self.translation_pct[L]:>10.2f}")
        avg = "n/a" if self.empty else f"{self.average_pct:.2f}"
        rows.append(f"{name:<12}{'avg':>8}{avg:>10}")
        return "\n".join(rows) + "\n"


def _as_matrices(traj) -> np.ndarray:
    if isinstance(traj, np.ndarray) and traj.ndim == 3:
        return traj.astype(float)
    return np.stack([p.as_matrix() if isinstance(p, Pose) else np.asarray(p, float) for p in traj])


def _rigid_inverse(T):
    out = np.zeros_like(T)
    Rt = np.swapaxes(T[:, :3, :3], 1, 2)
    out[:, :3, :3] = Rt
    out[:, :3, 3] = -np.einsum("nij,nj->ni", Rt, T[:, :3, 3])
    out[:, 3, 3] = 1.0
    return out


def path_distances(T: np.ndarray) -> np.ndarray:
    steps = np.linalg.norm(np.diff(T[:, :3, 3], axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def rte(estimate, ground_truth, lengths=KITTI_LENGTHS, step: int = 1) -> RteReport:
    """Relative translational error of ``estimate`` against ``ground_truth``.

    For every start frame (every ``step`` frames) and every segment length
    ``L``, the segment ends at the first frame whose ground-truth path
    distance from the start reaches ``L`` (the devkit requires exceeding it).
    The error pose
    ``(est_a⁻¹ est_b)⁻¹ (gt_a⁻¹ gt_b)`` contributes ``|t| / L`` and
    ``angle / L``.
    """
    E, G = _as_matrices(estimate), _as_matrices(ground_truth)
    if E.shape != G.shape:
        raise ValueError(f"trajectory lengths differ: {len(E)} vs {len(G)}")
    if step < 1:
        raise ValueError("step must be >= 1")
    lengths = [float(L) for L in lengths]
    dist = path_distances(G)
    Einv = _rigid_inverse(E)
    Ginv = _rigid_inverse(G)
    errs: list[tuple[int, float, float, float]] = []
    for first in range(0, len(G), step):
        for L in lengths:
            last = int(np.searchsorted(dist, dist[first] + L, side="left"))
            if last >= len(G):
                continue
            d_est = Einv[first] @ E[last]
            d_gt = Ginv[first] @ G[last]
            # translation of d_est⁻¹ d_gt; exactly zero when the deltas agree
            t_err = float(np.linalg.norm(d_est[:3, :3].T @ (d_gt[:3, 3] - d_est[:3, 3])))
            # |Ra - Rb|_F = 2 sqrt(2) sin(angle / 2)
            chord = np.linalg.norm(d_gt[:3, :3] - d_est[:3, :3]) / (2.0 * math.sqrt(2.0))
            r_err = 2.0 * math.asin(min(1.0, chord))
            errs.append((first, L, t_err / L, r_err / L))

    per_t = {L: 0.0 for L in lengths}
    per_r = {L: 0.0 for L in lengths}
    counts = {L: 0 for L in lengths}
    for _, L, t, r in errs:
        per_t[L] += t
        per_r[L] += r
        counts[L] += 1
    for L in lengths:
        if counts[L]:
            per_t[L] = 100.0 * per_t[L] / counts[L]
            per_r[L] = math.degrees(per_r[L] / counts[L])
    if not errs:
        return RteReport(lengths, per_t, per_r, counts, float("nan"), float("nan"), 0, True, errs)
    avg_t = 100.0 * float(np.mean([e[2] for e in errs]))
    avg_r = math.degrees(float(np.mean([e[3] for e in errs])))
    return RteReport(lengths, per_t, per_r, counts, avg_t, avg_r, len(errs), False, errs)
