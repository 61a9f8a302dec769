"""Point-to-point ICP with a robust kernel and a Hessian information matrix."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import se3
from .se3 import Pose

log = logging.getLogger(__name__)

DEFAULT_D_MAX = 3.0
DEFAULT_TAU = 1.0 / 3.0
DEFAULT_CONV_EPS = 1e-5
DEFAULT_MAX_ITERS = 100
DEFAULT_MIN_CORRS = 200
MAX_CONDITION = 1e12


class DegenerateGeometryError(RuntimeError):
    """The normal equations of a registration step are (near) singular."""


def _row_norm(d):
    return np.sqrt(np.einsum("ij,ij->i", d, d))


class SpatialIndex:
    """Exact nearest-neighbour index over a fixed cloud.

    Ties between equidistant points resolve to the lowest insertion index.
    Immutable after construction, so concurrent queries are safe.
    """

    def __init__(self, points):
        pts = np.asarray(getattr(points, "points", points), dtype=float).reshape(-1, 3)
        if pts.shape[0] == 0:
            raise ValueError("cannot index an empty cloud")
        self.points = pts
        self._tree = cKDTree(pts, leafsize=16)

    def __len__(self):
        return self.points.shape[0]

    def query(self, queries, d_max: float = np.inf):
        """Nearest neighbour per query row.

        Returns ``(dist, idx)``; rows with no neighbour closer than ``d_max``
        get ``dist = inf`` and ``idx = -1``.
        """
        dist, idx, _ = self.query2(queries, d_max)
        return dist, idx

    def query2(self, queries, bound: float = np.inf):
        """Like :meth:`query`, also returning the distance to the runner-up.

        The runner-up distance is ``inf`` when it is not below ``bound`` and
        equals the nearest distance on exact ties.
        """
        q = np.atleast_2d(np.asarray(queries, dtype=float))
        k = min(2, len(self))
        dist, idx = self._tree.query(q, k=k, distance_upper_bound=bound)
        if k == 1:
            dist = np.column_stack([dist, np.full(len(q), np.inf)])
            idx = idx[:, None]
        best_d, best_i, second = dist[:, 0].copy(), idx[:, 0].copy(), dist[:, 1].copy()
        tied = np.flatnonzero(np.isfinite(best_d) & (second == best_d))
        for r in tied:
            cand = self._tree.query_ball_point(q[r], best_d[r] * (1 + 1e-12) + 1e-300)
            cand = np.asarray(sorted(cand))
            dd = np.linalg.norm(self.points[cand] - q[r], axis=1)
            best_i[r] = cand[dd == dd.min()][0]
            best_d[r] = dd.min()
        miss = ~np.isfinite(best_d)
        best_i[miss] = -1
        return best_d, best_i, second


class _NeighbourCache:
    """Exact nearest neighbours for a cloud that moves a little per call.

    A point whose nearest neighbour ``b`` was at ``d1`` and runner-up at
    ``d2`` keeps ``b`` as long as it has moved less than ``(d2 - d1) / 2``
    since it was last queried (triangle inequality), so only the remaining
    points go back to the tree.
    """

    def __init__(self, index: SpatialIndex, d_max: float, margin: float):
        self.index = index
        self.d_max = d_max
        self.bound = d_max + margin
        self.anchor = None

    def _refresh(self, pts, rows):
        d1, i1, d2 = self.index.query2(pts[rows], self.bound)
        self.anchor[rows] = pts[rows]
        self.d1[rows] = d1
        self.idx[rows] = i1
        self.d2[rows] = np.minimum(d2, self.bound)

    def __call__(self, pts):
        if self.anchor is None:
            n = pts.shape[0]
            self.anchor = np.empty_like(pts)
            self.d1, self.d2 = np.empty(n), np.empty(n)
            self.idx = np.empty(n, dtype=np.intp)
            self._refresh(pts, np.arange(n))
        else:
            moved = _row_norm(pts - self.anchor)
            # unmatched points stay unmatched while they are still beyond d_max
            safe = np.where(
                self.idx >= 0,
                self.d1 + moved < self.d2 - moved - 1e-9,
                self.bound - moved > self.d_max + 1e-9,
            )
            stale = np.flatnonzero(~safe)
            if stale.size:
                self._refresh(pts, stale)
        hit = np.flatnonzero(self.idx >= 0)
        b = self.index.points[self.idx[hit]]
        dist = _row_norm(pts[hit] - b)
        keep = dist < self.d_max
        return Correspondences(pts[hit[keep]], b[keep], dist[keep])


def build_index(target) -> SpatialIndex:
    return SpatialIndex(target)


@dataclass
class Correspondences:
    """Matched pairs as parallel arrays: source ``a``, target ``b``, ``dist``."""

    a: np.ndarray
    b: np.ndarray
    dist: np.ndarray

    def __len__(self):
        return self.a.shape[0]


def find_correspondences(source, index: SpatialIndex, d_max: float = DEFAULT_D_MAX):
    src = np.asarray(source, dtype=float).reshape(-1, 3)
    if src.shape[0] == 0:
        return Correspondences(src, src.copy(), np.zeros(0))
    dist, idx = index.query(src, d_max)
    hit = np.flatnonzero(idx >= 0)
    b = index.points[idx[hit]]
    # same distance formula as the cached path inside icp()
    d = _row_norm(src[hit] - b)
    keep = d < d_max
    return Correspondences(src[hit[keep]], b[keep], d[keep])


def robust_kernel(e, tau: float = DEFAULT_TAU):
    """rho(e) = (e^2 / 2) / (tau + e^2)."""
    e2 = np.square(e)
    return 0.5 * e2 / (tau + e2)


def robust_weight(e, tau: float = DEFAULT_TAU):
    """IRLS weight ``rho'(e) / e = tau / (tau + e^2)^2``."""
    return tau / np.square(tau + np.square(e))


def _normal_equations(a, r, w):
    # H and g for residuals r = a + rho + phi x a - b, Jacobian [I | -a^].
    X = np.empty((a.shape[0], 4))
    X[:, 0] = 1.0
    X[:, 1:] = a
    M = (X * w[:, None]).T @ X  # [[sum w, sum wa^T], [sum wa, sum w a a^T]]
    sw, wa, waa = M[0, 0], M[1:, 0], M[1:, 1:]
    H = np.zeros((6, 6))
    H[:3, :3] = sw * np.eye(3)
    H[:3, 3:] = -se3.hat(wa)
    H[3:, :3] = se3.hat(wa)
    H[3:, 3:] = np.trace(waa) * np.eye(3) - waa
    axr = np.empty_like(a)
    axr[:, 0] = a[:, 1] * r[:, 2] - a[:, 2] * r[:, 1]
    axr[:, 1] = a[:, 2] * r[:, 0] - a[:, 0] * r[:, 2]
    axr[:, 2] = a[:, 0] * r[:, 1] - a[:, 1] * r[:, 0]
    g = np.concatenate([w @ r, w @ axr])
    return H, g


def residual_jacobian(a) -> np.ndarray:
    """Jacobian of ``exp(xi) a - b`` at ``xi = 0``; shape ``(N, 3, 6)``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    J = np.zeros((a.shape[0], 3, 6))
    J[:, :, :3] = np.eye(3)
    J[:, :, 3:] = -se3.hat(a)
    return J


def gauss_newton_step(corrs: Correspondences, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Twist increment of one IRLS Gauss-Newton step on the robust cost."""
    if len(corrs) == 0:
        raise DegenerateGeometryError("no correspondences")
    r = corrs.a - corrs.b
    w = robust_weight(corrs.dist, tau)
    H, g = _normal_equations(corrs.a, r, w)
    ev = np.linalg.eigvalsh(H)  # H is symmetric positive semi-definite
    cond = ev[-1] / ev[0] if ev[0] > 0 else np.inf
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise DegenerateGeometryError(f"normal matrix condition number {cond:.3g}")
    return -np.linalg.solve(H, g)


def information_matrix(corrs: Correspondences, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Robust Gauss-Newton Hessian ``sum w_i J_i^T J_i`` at the given pairs."""
    w = robust_weight(corrs.dist, tau)
    H, _ = _normal_equations(corrs.a, np.zeros_like(corrs.a), w)
    return 0.5 * (H + H.T)


def robust_cost(corrs: Correspondences, tau: float = DEFAULT_TAU) -> float:
    return float(robust_kernel(np.linalg.norm(corrs.a - corrs.b, axis=1), tau).sum())


@dataclass
class RegistrationResult:
    delta: Pose
    information: np.ndarray
    iterations: int
    final_correspondences: int
    converged: bool = True


def icp(
    source,
    index: SpatialIndex,
    d_max: float = DEFAULT_D_MAX,
    tau: float = DEFAULT_TAU,
    conv_eps: float = DEFAULT_CONV_EPS,
    max_iters: int = DEFAULT_MAX_ITERS,
    min_corrs: int = DEFAULT_MIN_CORRS,
) -> RegistrationResult | None:
    """Align ``source`` to the indexed cloud.

    Returns ``None`` when any iteration finds fewer than ``min_corrs``
    correspondences; that is an expected outcome for scans with little overlap.
    The returned ``delta`` maps the given source points onto the target.
    """
    pts = np.asarray(getattr(source, "points", source), dtype=float).reshape(-1, 3)
    delta = np.eye(4)
    corrs = None
    converged = False
    nearest = _NeighbourCache(index, d_max, margin=0.5 * d_max)
    it = 0
    for it in range(1, max_iters + 1):
        corrs = nearest(pts)
        if len(corrs) < min_corrs:
            log.debug("registration aborted: %d correspondences at iteration %d", len(corrs), it)
            return None
        xi = gauss_newton_step(corrs, tau)
        step = se3.batch_exp(xi)
        pts = pts @ step[:3, :3].T + step[:3, 3]
        delta = step @ delta
        if np.linalg.norm(xi) < conv_eps:
            converged = True
            break
    if not converged:
        log.warning("ICP hit the iteration cap (%d) without converging", max_iters)
    info = information_matrix(corrs, tau)
    R = delta[:3, :3]
    if np.linalg.norm(R.T @ R - np.eye(3)) > se3.ORTHO_TOL:
        delta[:3, :3] = se3.orthonormalize(R)
    return RegistrationResult(Pose.from_matrix(delta), info, it, len(corrs), converged)
