"""Deterministic lidar simulator over a world of planes and axis-aligned boxes.

The ray pattern is fixed: 64 elevation rings spread uniformly over
[-22.5°, +22.5°], each sampled at uniformly spaced azimuths over a full turn.
Ring ``r`` is shifted by ``frac(r * 0.618...)`` of one azimuth step so that
rings do not line up, which avoids rotational aliasing of ground returns.
Rays are emitted azimuth-major, and a ray's relative timestamp is its
azimuth index divided by the azimuth count, so the sweep starts at azimuth
-pi and runs counter-clockwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import se3
from .preprocess import RawScan
from .se3 import Pose

N_RINGS = 64
FOV_DEG = 22.5
SENSOR_HEIGHT = 1.8
_BOX_CHUNK = 16


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]


@dataclass(frozen=True)
class Plane:
    """Infinite plane ``normal . x = offset``."""

    normal: tuple[float, float, float]
    offset: float


@dataclass
class World:
    boxes: list[Box] = field(default_factory=list)
    planes: list[Plane] = field(default_factory=list)
    seed: int = 0

    def is_empty(self) -> bool:
        return not self.boxes and not self.planes


@dataclass
class ScriptedTrajectory:
    poses: list[Pose]
    speed: float = 0.0
    yaw_rates: list[float] = field(default_factory=list)
    dt: float = 0.1


@dataclass
class SensorParams:
    rays: int = N_RINGS * 360
    max_range: float = 100.0
    noise_sigma: float = 0.0
    seed: int = 0


@dataclass
class SequenceSource:
    scans: list[RawScan]
    ground_truth: list[Pose] | None = None
    max_range: float = 100.0


def ray_directions(rays: int):
    """Unit directions in the sensor frame and their sweep timestamps."""
    if rays <= 0:
        raise ValueError("rays must be positive")
    n_az = math.ceil(rays / N_RINGS)
    elev = np.deg2rad(np.linspace(-FOV_DEG, FOV_DEG, N_RINGS))
    az = -np.pi + 2 * np.pi * np.arange(n_az) / n_az
    A, E = np.meshgrid(az, elev, indexing="ij")  # azimuth-major
    # per-ring stagger of a golden-ratio fraction of the azimuth step
    A = A + (np.arange(N_RINGS) * 0.6180339887498949 % 1.0)[None, :] * (2 * np.pi / n_az)
    A, E = A.ravel()[:rays], E.ravel()[:rays]
    dirs = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=1)
    stamps = np.repeat(np.arange(n_az) / n_az, N_RINGS)[:rays]
    return dirs, stamps


def intersect(world: World, origins, dirs, max_range: float) -> np.ndarray:
    """Distance along each ray to the first surface, ``inf`` when nothing is hit.

    Boxes are solid and seen from outside only: a ray starting inside a box
    passes through its walls.
    """
    origins = np.broadcast_to(np.asarray(origins, float), dirs.shape)
    best = np.full(dirs.shape[0], np.inf)
    eps = 1e-9
    for pl in world.planes:
        n = np.asarray(pl.normal, float)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (pl.offset - origins @ n) / denom
        t[~np.isfinite(t) | (t <= eps)] = np.inf
        np.minimum(best, t, out=best)
    if world.boxes:
        lo = np.array([b.lo for b in world.boxes], float)
        hi = np.array([b.hi for b in world.boxes], float)
        # cull boxes that no ray can reach
        center = origins.mean(axis=0)
        spread = np.linalg.norm(origins - center, axis=1).max()
        gap = np.maximum(np.maximum(lo - center, center - hi), 0.0)
        keep = np.linalg.norm(gap, axis=1) <= max_range + spread
        lo, hi = lo[keep], hi[keep]
        with np.errstate(divide="ignore"):
            inv = 1.0 / dirs
        single = np.ptp(origins, axis=0).max() == 0.0 if len(origins) else False
        if single:
            _boxes_single_origin(origins[0], dirs, inv, lo, hi, best, eps)
        else:
            for s in range(0, len(lo), _BOX_CHUNK):
                t = _slab(origins[:, None], inv[:, None], lo[s:s + _BOX_CHUNK][None],
                          hi[s:s + _BOX_CHUNK][None], eps)
                np.minimum(best, t.min(axis=1), out=best)
    best[best > max_range] = np.inf
    return best


def _slab(origins, inv, lo, hi, eps):
    # ray/box slab test; broadcasting over rays and boxes
    with np.errstate(invalid="ignore"):
        t1 = (lo - origins) * inv
        t2 = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    return np.where((tmax >= tmin) & (tmin > eps), tmin, np.inf)


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def _boxes_single_origin(o, dirs, inv, lo, hi, best, eps):
    # Only rays inside a box's azimuth window can hit it.
    az = np.arctan2(dirs[:, 1], dirs[:, 0])
    for blo, bhi in zip(lo, hi):
        if blo[0] <= o[0] <= bhi[0] and blo[1] <= o[1] <= bhi[1]:
            rows = np.arange(dirs.shape[0])
        else:
            cx, cy = np.meshgrid([blo[0], bhi[0]], [blo[1], bhi[1]])
            corner = np.arctan2(cy.ravel() - o[1], cx.ravel() - o[0])
            mid = np.arctan2(0.5 * (blo[1] + bhi[1]) - o[1], 0.5 * (blo[0] + bhi[0]) - o[0])
            half = np.abs(_wrap(corner - mid)).max() + 1e-6
            rows = np.flatnonzero(np.abs(_wrap(az - mid)) <= half)
            if rows.size == 0:
                continue
        t = _slab(o, inv[rows], blo, bhi, eps)
        best[rows] = np.minimum(best[rows], t)


def raycast_scan(
    world: World,
    pose: Pose,
    rays: int = N_RINGS * 360,
    max_range: float = 100.0,
    noise_sigma: float = 0.0,
    seed: int = 0,
    sweep_motion: Pose | None = None,
) -> RawScan:
    """Simulate one sweep from ``pose``; points are returned in the sensor frame.

    With ``sweep_motion`` set, the ray at relative time ``s`` is cast from
    ``pose ⊕ interpolate(sweep_motion, s - 1)`` instead, which reproduces the
    distortion of a moving spinning sensor.
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    dirs, stamps = ray_directions(rays)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, noise_sigma, size=dirs.shape[0]) if noise_sigma > 0 else 0.0
    if world.is_empty():
        return RawScan(np.zeros((0, 3)), np.zeros(0))

    if sweep_motion is None:
        wdirs = dirs @ pose.R.T
        rng_hit = intersect(world, pose.t[None, :], wdirs, max_range)
    else:
        xi = se3.log(sweep_motion)
        uniq, inv = np.unique(stamps, return_inverse=True)
        T = pose.as_matrix() @ se3.batch_exp((uniq - 1.0)[:, None] * xi[None, :])
        R = T[inv, :3, :3]
        wdirs = np.einsum("nij,nj->ni", R, dirs)
        rng_hit = intersect(world, T[inv, :3, 3], wdirs, max_range)

    ranges = rng_hit + noise
    ok = np.isfinite(rng_hit) & (ranges > 0)
    pts = dirs[ok] * ranges[ok, None]
    return RawScan(pts, stamps[ok])


def sample_surfaces(world: World, n: int, seed: int = 0, extent: float = 20.0) -> np.ndarray:
    """Uniform random points on the world's surfaces, area weighted.

    Boxes are sampled over their five faces excluding the bottom; each plane is
    sampled over the square patch of half-width ``extent`` around the origin
    (planes must not be parallel to the z axis).
    """
    rng = np.random.default_rng(seed)
    faces = []  # (origin, u, v)
    for bx in world.boxes:
        lo, hi = np.asarray(bx.lo, float), np.asarray(bx.hi, float)
        dx, dy, dz = hi - lo
        ex, ey, ez = np.eye(3)
        faces += [
            (np.array([lo[0], lo[1], hi[2]]), dx * ex, dy * ey),
            (lo, dx * ex, dz * ez),
            (np.array([lo[0], hi[1], lo[2]]), dx * ex, dz * ez),
            (lo, dy * ey, dz * ez),
            (np.array([hi[0], lo[1], lo[2]]), dy * ey, dz * ez),
        ]
    for pl in world.planes:
        nrm = np.asarray(pl.normal, float)
        if abs(nrm[2]) < 1e-9:
            raise ValueError("sample_surfaces needs planes with a z component")
        corner = np.array([-extent, -extent, 0.0])
        corner[2] = (pl.offset - nrm[:2] @ corner[:2]) / nrm[2]
        u = np.array([2 * extent, 0.0, -2 * extent * nrm[0] / nrm[2]])
        v = np.array([0.0, 2 * extent, -2 * extent * nrm[1] / nrm[2]])
        faces.append((corner, u, v))
    if not faces:
        return np.zeros((0, 3))
    area = np.array([np.linalg.norm(np.cross(u, v)) for _, u, v in faces])
    which = rng.choice(len(faces), size=n, p=area / area.sum())
    st = rng.random((n, 2))
    O = np.array([f[0] for f in faces])[which]
    U = np.array([f[1] for f in faces])[which]
    V = np.array([f[2] for f in faces])[which]
    return O + st[:, :1] * U + st[:, 1:] * V


def scripted_trajectory(
    n: int,
    speed: float,
    dt: float = 0.1,
    yaw_rates=0.0,
    wobble: tuple[float, float, float] = (0.0, 0.0, 0.0),
    seed: int = 0,
    ramp: float = 0.0,
) -> ScriptedTrajectory:
    """Constant-speed drive on the ground plane starting at the identity.

    ``yaw_rates`` is a scalar or a per-step sequence (rad/s); only the first
    ``n - 1`` entries of a sequence are used.  Each step advances the planar
    base pose by ``exp([speed*dt, 0, 0, 0, 0, yaw_rate*dt])``.

    ``wobble = (pitch, roll, heave)`` adds seeded, independent per-frame body
    motion drawn uniformly from ``±pitch``/``±roll`` radians and ``±heave``
    meters on top of the base pose (suspension and mounting vibration).  The
    first pose is always the identity.

    With ``ramp > 0`` the platform starts from rest and reaches ``speed``
    linearly after ``ramp`` seconds; yaw rates scale with the speed.
    """
    rates = np.asarray(yaw_rates, float)
    rates = np.broadcast_to(rates if rates.ndim == 0 else rates[: max(n - 1, 0)], (max(n - 1, 0),))
    rng = np.random.default_rng(seed)
    amp = np.asarray(wobble, float)
    base = Pose()
    poses = [Pose()]
    for k in range(n - 1):
        f = min(1.0, (k + 1) * dt / ramp) if ramp > 0 else 1.0
        base = base @ se3.exp([f * speed * dt, 0, 0, 0, 0, f * rates[k] * dt])
        pitch, roll, heave = rng.uniform(-1.0, 1.0, 3) * amp
        poses.append(base @ Pose.from_rotvec([roll, pitch, 0.0], [0.0, 0.0, heave]))
    return ScriptedTrajectory(poses[:n], speed, list(rates), dt)


def turning_yaw_rates(n: int, dt: float = 0.1, seed: int = 0, turn_rate: float = 0.35,
                      straight: tuple[int, int] = (20, 45), turn: tuple[int, int] = (10, 25)):
    """Alternate straight segments with left/right turns of random length."""
    rng = np.random.default_rng(seed)
    out = []
    sign = 1.0
    while len(out) < n:
        out += [0.0] * int(rng.integers(*straight))
        out += [sign * turn_rate] * int(rng.integers(*turn))
        sign = -sign if rng.random() < 0.7 else sign
    return out[:n]


def box_world(n_boxes: int = 20, seed: int = 3, half_extent: float = 12.0,
              clearance: float = 2.0) -> World:
    """Random upright boxes standing on the ground plane ``z = -SENSOR_HEIGHT``.

    Boxes whose footprint comes within ``clearance`` of the origin are redrawn,
    so a sensor at the origin stands in free space.
    """
    rng = np.random.default_rng(seed)
    boxes = []
    while len(boxes) < n_boxes:
        c = rng.uniform(-half_extent, half_extent, 2)
        size = rng.uniform([1.0, 1.0, 2.0], [5.0, 5.0, 8.0])
        lo = (c[0] - size[0] / 2, c[1] - size[1] / 2, -SENSOR_HEIGHT)
        hi = (c[0] + size[0] / 2, c[1] + size[1] / 2, -SENSOR_HEIGHT + size[2])
        if np.linalg.norm(np.clip([0.0, 0.0], lo[:2], hi[:2])) < clearance:
            continue
        boxes.append(Box(lo, hi))
    return World(boxes, [Plane((0.0, 0.0, 1.0), -SENSOR_HEIGHT)], seed)


def city_world(
    trajectory: ScriptedTrajectory | list[Pose],
    seed: int = 0,
    spacing: float = 8.0,
    clearance: float = 3.0,
) -> World:
    """Street-like world around a trajectory: ground plane, facades, cars, poles.

    Every ``spacing`` meters of path, each side of the road gets a facade
    block (8-16 m out, with occasional gaps), possibly a parked car and a
    pole near the curb, and a detached block further away.  Nothing is placed
    within ``clearance`` meters (in the ground plane) of any trajectory
    position.
    """
    poses = trajectory.poses if isinstance(trajectory, ScriptedTrajectory) else trajectory
    rng = np.random.default_rng(seed)
    path = np.array([p.t[:2] for p in poses])
    boxes: list[Box] = []

    def place(p: Pose, along, lateral, size):
        c = p.R[:2, :2] @ np.array([along, lateral]) + p.t[:2]
        # footprint axis-aligned in the world, whatever the heading
        lo = np.array([c[0] - size[0] / 2, c[1] - size[1] / 2, -SENSOR_HEIGHT])
        hi = np.array([c[0] + size[0] / 2, c[1] + size[1] / 2, -SENSOR_HEIGHT + size[2]])
        nearest = np.clip(path, lo[:2], hi[:2])
        if np.min(np.linalg.norm(nearest - path, axis=1)) < clearance:
            return
        boxes.append(Box(tuple(lo), tuple(hi)))

    travelled = 0.0
    next_drop = 0.0
    for k, p in enumerate(poses):
        if k:
            travelled += float(np.linalg.norm(path[k] - path[k - 1]))
        if travelled < next_drop:
            continue
        next_drop = travelled + spacing
        for side in (-1.0, 1.0):
            if rng.random() < 0.8:
                w = rng.uniform(4.0, 9.0)
                place(p, rng.uniform(-2, 2), side * (rng.uniform(8.0, 12.0) + w / 2),
                      (w, w, rng.uniform(6.0, 20.0)))
            if rng.random() < 0.5:
                place(p, rng.uniform(-spacing / 2, spacing / 2), side * rng.uniform(4.5, 6.0),
                      rng.uniform([1.6, 1.6, 1.3], [4.5, 4.5, 1.8]))
            if rng.random() < 0.6:
                place(p, rng.uniform(-spacing / 2, spacing / 2), side * rng.uniform(4.0, 7.0),
                      (0.4, 0.4, rng.uniform(3.0, 8.0)))
            if rng.random() < 0.7:
                place(p, rng.uniform(-spacing, spacing), side * rng.uniform(22.0, 60.0),
                      rng.uniform([3.0, 3.0, 3.0], [12.0, 12.0, 25.0]))
    ground = Plane((0.0, 0.0, 1.0), -SENSOR_HEIGHT)
    return World(boxes, [ground], seed)


def generate_sequence(
    world: World,
    trajectory: ScriptedTrajectory | list[Pose],
    sensor: SensorParams | None = None,
    motion_distortion: bool = False,
) -> SequenceSource:
    """One scan per trajectory pose, plus the ground-truth trajectory.

    Scans are instantaneous by default and then carry no timestamps, so no
    deskewing is applied to them downstream.  With ``motion_distortion`` each
    ray is cast from the pose interpolated along the preceding step and the
    sweep timestamps are kept.
    """
    sensor = sensor or SensorParams()
    poses = trajectory.poses if isinstance(trajectory, ScriptedTrajectory) else list(trajectory)
    scans = []
    for k, pose in enumerate(poses):
        motion = None
        if motion_distortion and k > 0:
            motion = poses[k - 1].inverse() @ pose
        scan = raycast_scan(
            world, pose, sensor.rays, sensor.max_range, sensor.noise_sigma,
            seed=sensor.seed * 1_000_003 + k, sweep_motion=motion,
        )
        if not motion_distortion:
            scan = RawScan(scan.points, None, k * getattr(trajectory, "dt", 0.1))
        else:
            scan = RawScan(scan.points, scan.timestamps, k * getattr(trajectory, "dt", 0.1))
        scans.append(scan)
    return SequenceSource(scans, list(poses), sensor.max_range)
