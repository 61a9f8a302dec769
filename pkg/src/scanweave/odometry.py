"""Per-frame odometry: prediction, multi-keyframe ICP, graph smoothing, keyframes."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import registration as reg
from . import se3
from .posegraph import Constraint, OptimizationError, PoseGraph
from .preprocess import DownsampledScan, RawScan, preprocess
from .se3 import Pose

log = logging.getLogger(__name__)

THREADS_ENV = "SCANWEAVE_THREADS"


@dataclass
class PipelineConfig:
    v_map: float = 0.5
    v_icp: float = 1.5
    d_max: float = 3.0
    tau: float = 1.0 / 3.0
    conv_eps: float = 1e-5
    max_icp_iters: int = 100
    min_corrs: int = 200
    kappa: float = 3.0
    gamma: float | None = None  # None: one third of max_lidar_range
    lm_iters: int = 15
    max_lidar_range: float = 100.0

    def __post_init__(self):
        if self.gamma is None:
            self.gamma = self.max_lidar_range / 3.0
        self.validate()

    def validate(self):
        for name in ("v_map", "v_icp", "d_max", "tau", "conv_eps", "kappa", "gamma", "max_lidar_range"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.v_icp < self.v_map:
            raise ValueError(f"v_icp ({self.v_icp}) must be >= v_map ({self.v_map})")
        if self.min_corrs < 0 or self.max_icp_iters < 1 or self.lm_iters < 0:
            raise ValueError("iteration counts must be positive and min_corrs non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Keyframe:
    node: int
    cloud: DownsampledScan
    index: reg.SpatialIndex

    @property
    def time_index(self) -> int:
        return self.node


@dataclass
class Measurement:
    keyframe: Keyframe
    measurement: Pose
    information: np.ndarray
    iterations: int


@dataclass
class FrameResult:
    node: int
    pose: Pose
    constraints_added: int
    registrations_aborted: int
    degenerate: bool = False
    keyframe_inserted: bool = False
    evicted: list[int] = field(default_factory=list)
    chi2: float = 0.0

    def to_dict(self) -> dict:
        return {
            "node": self.node,
            "constraints_added": self.constraints_added,
            "registrations_aborted": self.registrations_aborted,
            "degenerate": self.degenerate,
            "keyframe_inserted": self.keyframe_inserted,
            "evicted": list(self.evicted),
            "chi2": self.chi2,
            "translation": [float(v) for v in self.pose.t],
        }


def predict_motion(x_prev: Pose, x_prev2: Pose | None) -> Pose:
    """Last inter-frame motion ``x_prev2⁻¹ ⊕ x_prev`` (identity without history)."""
    if x_prev2 is None:
        return Pose()
    return x_prev2.inverse() @ x_prev


def predict_pose(x_prev: Pose, motion: Pose) -> Pose:
    return x_prev @ motion


def thread_count() -> int:
    try:
        n = int(os.environ.get(THREADS_ENV, "1"))
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer") from None
    return max(1, n)


def register_to_keyframes(
    scan: DownsampledScan,
    x_hat: Pose,
    keyframes: list[Keyframe],
    poses: dict[int, Pose],
    cfg: PipelineConfig,
    threads: int = 1,
) -> tuple[list[Measurement], int]:
    """Register ``scan`` independently against every keyframe.

    ``poses`` maps keyframe node ids to their current global poses.  Returns
    the successful measurements (sorted by keyframe node) and the number of
    aborted registrations.  A measurement is the pose of the scan in the
    keyframe's frame; its information matrix is expressed in the tangent space
    of right perturbations of that pose.
    """
    def one(kf: Keyframe):
        guess = poses[kf.node].inverse() @ x_hat
        source = guess.apply(scan.points)
        try:
            res = reg.icp(source, kf.index, cfg.d_max, cfg.tau, cfg.conv_eps,
                          cfg.max_icp_iters, cfg.min_corrs)
        except reg.DegenerateGeometryError as exc:
            log.warning("registration to keyframe %d degenerate: %s", kf.node, exc)
            return None
        if res is None:
            return None
        z = res.delta @ guess
        # ICP perturbs z on the left; the graph perturbs on the right
        Ad = se3.adjoint(z)
        info = Ad.T @ res.information @ Ad
        return Measurement(kf, z, 0.5 * (info + info.T), res.iterations)

    ordered = sorted(keyframes, key=lambda k: k.node)
    if threads > 1 and len(ordered) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(one, ordered))
    else:
        results = [one(kf) for kf in ordered]
    found = [r for r in results if r is not None]
    return found, len(results) - len(found)


class Odometry:
    """Stateful odometry over a stream of scans.

    >>> odom = Odometry(PipelineConfig(max_lidar_range=60.0))
    >>> for scan in scans:                       # doctest: +SKIP
    ...     result = odom.process_frame(scan)
    >>> trajectory = odom.trajectory()           # doctest: +SKIP
    """

    def __init__(self, config: PipelineConfig | None = None, threads: int | None = None):
        self.config = config or PipelineConfig()
        self.threads = thread_count() if threads is None else max(1, threads)
        self.graph = PoseGraph()
        self.keyframes: list[Keyframe] = []
        self.poses: dict[int, Pose] = {}  # latest estimate of every node
        self.results: list[FrameResult] = []
        self._next_id = 0

    @property
    def frame_count(self) -> int:
        return self._next_id

    def trajectory(self) -> list[Pose]:
        """Current estimate for every processed frame, in order."""
        return [self.poses[k] for k in range(self._next_id)]

    def _history(self) -> tuple[Pose | None, Pose | None]:
        n = self._next_id
        prev = self.poses.get(n - 1)
        prev2 = self.poses.get(n - 2)
        return prev, prev2

    def process_frame(self, scan: RawScan) -> FrameResult:
        cfg = self.config
        nid = self._next_id
        x_prev, x_prev2 = self._history()

        if x_prev is None:
            K, _ = preprocess(scan, Pose(), cfg.v_map, cfg.v_icp)
            self._next_id += 1
            pose = Pose()
            self.graph.add_node(nid, pose, fixed=True)
            self.poses[nid] = pose
            inserted = self._insert_keyframe(nid, K)
            res = FrameResult(nid, pose, 0, 0, keyframe_inserted=inserted)
            self.results.append(res)
            return res

        motion = predict_motion(x_prev, x_prev2)
        K, I = preprocess(scan, motion, cfg.v_map, cfg.v_icp)
        x_hat = predict_pose(x_prev, motion)
        found, aborted = ([], len(self.keyframes))
        if len(I) and self.keyframes:
            found, aborted = register_to_keyframes(
                I, x_hat, self.keyframes, self.poses, cfg, self.threads
            )
        self._next_id += 1

        if not found:
            log.warning("frame %d: all %d registrations aborted; using prediction", nid, aborted)
            self.poses[nid] = x_hat
            res = FrameResult(nid, x_hat, 0, aborted, degenerate=True)
            self.results.append(res)
            return res

        newest = found[-1]
        init = self.poses[newest.keyframe.node] @ newest.measurement
        self.graph.add_node(nid, init)
        for m in found:
            self.graph.add_constraint(Constraint(nid, m.keyframe.node, m.measurement, m.information))
        chi2 = self._optimize()
        for k, node in self.graph.nodes.items():
            self.poses[k] = node.pose
        inserted, evicted = self.manage_keyframes(nid, K)
        res = FrameResult(nid, self.poses[nid], len(found), aborted,
                          keyframe_inserted=inserted, evicted=evicted, chi2=chi2)
        self.results.append(res)
        return res

    def _optimize(self) -> float:
        try:
            return self.graph.optimize(self.config.lm_iters).final_chi2
        except OptimizationError as exc:
            log.warning("graph optimization failed, keeping initial guesses: %s", exc)
            return self.graph.chi2()

    def _insert_keyframe(self, nid: int, cloud: DownsampledScan) -> bool:
        if len(cloud) == 0:
            return False
        self.keyframes.append(Keyframe(nid, cloud, reg.build_index(cloud.points)))
        return True

    def manage_keyframes(self, nid: int, cloud: DownsampledScan) -> tuple[bool, list[int]]:
        """Insert the current scan as a keyframe and slide the window.

        Returns ``(inserted, evicted_keyframe_nodes)``.
        """
        cfg = self.config
        here = self.poses[nid].t
        inserted = False
        if not self.keyframes or (
            np.linalg.norm(here - self.poses[self.keyframes[-1].node].t) > cfg.kappa
        ):
            inserted = self._insert_keyframe(nid, cloud)

        evicted = [
            kf.node for kf in self.keyframes
            if np.linalg.norm(self.poses[kf.node].t - here) > cfg.gamma
        ]
        if evicted:
            gone = set(evicted)
            self.keyframes = [kf for kf in self.keyframes if kf.node not in gone]

        # every node that left the window is frozen
        for k in self.graph.active_ids():
            if np.linalg.norm(self.graph.pose(k).t - here) > cfg.gamma:
                self.graph.fix_node(k)
        self.graph.drop_fixed_constraints()
        referenced = self.graph.referenced()
        keyframe_nodes = {kf.node for kf in self.keyframes}
        for k in self.graph.fixed_ids():
            if k not in referenced and k not in keyframe_nodes and k != nid:
                self.poses[k] = self.graph.remove_node(k).pose
        if self.graph.nodes and not self.graph.fixed_ids():
            self.graph.fix_node(min(self.graph.nodes))
        return inserted, evicted

    def run(self, scans) -> list[Pose]:
        for scan in scans:
            self.process_frame(scan)
        return self.trajectory()
