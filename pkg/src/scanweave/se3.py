"""Rigid-body transforms in SE(3).

A :class:`Pose` maps body-frame coordinates to world-frame coordinates,
``p_world = R @ p_body + t``.  Composition is the product of homogeneous
matrices, so ``a @ b`` applies ``b`` first.

Twists are plain ``(6,)`` arrays ordered ``[rho, phi]``: translational part
first (meters), rotational part second (radians).  All vector helpers below
accept leading batch dimensions.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9
_SMALL = 0.1


class DegenerateRotationError(ValueError):
    """Raised by :func:`log` when the rotation angle is (numerically) pi."""


def hat(v):
    """Skew-symmetric matrix of ``v`` (shape ``(..., 3)`` -> ``(..., 3, 3)``)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _series(theta, direct, coeffs):
    # Evaluate `direct` away from zero and the even Taylor series near zero.
    if np.ndim(theta) == 0:
        t = float(theta)
        if t < _SMALL:
            t2 = t * t
            return np.float64(sum(c * t2**k for k, c in enumerate(coeffs)))
        return np.float64(direct(t))
    theta = np.asarray(theta, dtype=float)
    small = theta < _SMALL
    t2 = theta * theta
    approx = np.zeros_like(theta)
    for k, c in enumerate(coeffs):
        approx = approx + c * t2**k
    safe = np.where(small, 1.0, theta)
    with np.errstate(invalid="ignore", divide="ignore"):
        val = direct(safe)
    return np.where(small, approx, val)


def _sinc(theta):
    return _series(theta, lambda t: np.sin(t) / t, (1.0, -1 / 6, 1 / 120, -1 / 5040))


def _cosc(theta):
    # (1 - cos) / theta^2
    return _series(
        theta, lambda t: (1 - np.cos(t)) / t**2, (0.5, -1 / 24, 1 / 720, -1 / 40320)
    )


def _sinc3(theta):
    # (theta - sin) / theta^3
    return _series(
        theta,
        lambda t: (t - np.sin(t)) / t**3,
        (1 / 6, -1 / 120, 1 / 5040, -1 / 362880),
    )


def _jinv_coeff(theta):
    # 1/theta^2 - (1 + cos) / (2 theta sin)
    return _series(
        theta,
        lambda t: 1 / t**2 - (1 + np.cos(t)) / (2 * t * np.sin(t)),
        (1 / 12, 1 / 720, 1 / 30240, 1 / 1209600),
    )


def so3_exp(phi):
    """Rodrigues' formula, batched."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    K = hat(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return (
        eye
        + _sinc(theta)[..., None, None] * K
        + _cosc(theta)[..., None, None] * (K @ K)
    )


def so3_log(R):
    """Rotation vector of ``R`` (batched).  Angles are returned in ``[0, pi]``."""
    R = np.asarray(R, dtype=float)
    return Rotation.from_matrix(R.reshape(-1, 3, 3)).as_rotvec().reshape(R.shape[:-1])


def so3_left_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    K = hat(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return (
        eye
        + _cosc(theta)[..., None, None] * K
        + _sinc3(theta)[..., None, None] * (K @ K)
    )


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    K = hat(phi)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye - 0.5 * K + _jinv_coeff(theta)[..., None, None] * (K @ K)


def _q_matrix(rho, phi):
    # Coupling block of the SE(3) left Jacobian.
    theta = np.linalg.norm(phi, axis=-1)
    P = hat(phi)
    Rh = hat(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    c1 = _sinc3(theta)
    c2 = _series(
        theta,
        lambda t: (t**2 + 2 * np.cos(t) - 2) / (2 * t**4),
        (1 / 24, -1 / 720, 1 / 40320, -1 / 3628800),
    )
    c3 = _series(
        theta,
        lambda t: (2 * t - 3 * np.sin(t) + t * np.cos(t)) / (2 * t**5),
        (1 / 120, -1 / 2520, 1 / 120960, -1 / 9979200),
    )
    c1, c2, c3 = (c[..., None, None] for c in (c1, c2, c3))
    return (
        0.5 * Rh
        + c1 * (PR + RP + PRP)
        + c2 * (P @ PR + RP @ P - 3 * PRP)
        + c3 * (PRP @ P + P @ PRP)
    )


def se3_left_jacobian(xi):
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    J = so3_left_jacobian(phi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = J
    out[..., 3:, 3:] = J
    out[..., :3, 3:] = _q_matrix(rho, phi)
    return out


def se3_left_jacobian_inv(xi):
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    Ji = so3_left_jacobian_inv(phi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = Ji
    out[..., 3:, 3:] = Ji
    out[..., :3, 3:] = -Ji @ _q_matrix(rho, phi) @ Ji
    return out


def se3_right_jacobian_inv(xi):
    """Inverse right Jacobian: ``log(exp(xi) exp(d)) ~ xi + Jr^-1(xi) d``."""
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


def orthonormalize(R):
    """Closest rotation matrix to ``R`` (polar decomposition via SVD)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


class Pose:
    """Immutable element of SE(3) with rotation ``R`` and translation ``t``."""

    __slots__ = ("R", "t")

    def __init__(self, R=None, t=None):
        R = np.eye(3) if R is None else np.array(R, dtype=float)
        t = np.zeros(3) if t is None else np.array(t, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def __setattr__(self, name, value):
        raise AttributeError("Pose is immutable")

    def __reduce__(self):
        return (Pose, (np.array(self.R), np.array(self.t)))

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_translation(cls, x, y=None, z=None) -> Pose:
        t = np.asarray(x, dtype=float) if y is None else np.array([x, y, z], float)
        return cls(np.eye(3), t)

    @classmethod
    def from_rotvec(cls, phi, t=None) -> Pose:
        return cls(so3_exp(phi), t)

    @classmethod
    def from_quaternion(cls, q, t=None) -> Pose:
        """Hamilton quaternion, scalar last ``(qx, qy, qz, qw)``."""
        return cls(Rotation.from_quat(q).as_matrix(), t)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def quaternion(self) -> np.ndarray:
        return Rotation.from_matrix(self.R).as_quat()

    def __matmul__(self, other):
        if isinstance(other, Pose):
            return compose(self, other)
        return NotImplemented

    def inverse(self) -> Pose:
        return inverse(self)

    def apply(self, points):
        return transform_point(self, points)

    def log(self):
        return log(self)

    def angle(self) -> float:
        """Rotation angle in radians."""
        c = (np.trace(self.R) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def __repr__(self):
        return f"Pose(t={np.array2string(self.t, precision=6)}, rotvec={np.array2string(so3_log(self.R), precision=6)})"


def compose(a: Pose, b: Pose) -> Pose:
    """``a ⊕ b``: apply ``b`` first, then ``a``."""
    R = a.R @ b.R
    if np.linalg.norm(R.T @ R - np.eye(3)) > ORTHO_TOL:
        R = orthonormalize(R)
    return Pose(R, a.R @ b.t + a.t)


def inverse(p: Pose) -> Pose:
    Rt = p.R.T
    return Pose(Rt, -Rt @ p.t)


def transform_point(p: Pose, q):
    """``R q + t`` for a single point ``(3,)`` or an array of points ``(N, 3)``."""
    q = np.asarray(q, dtype=float)
    return q @ p.R.T + p.t


def exp(xi) -> Pose:
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    return Pose(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def log(p: Pose) -> np.ndarray:
    """Twist ``[rho, phi]`` with ``exp(log(p)) == p``.

    Raises :class:`DegenerateRotationError` when the rotation angle is pi,
    where the rotation axis sign is ambiguous.
    """
    phi = so3_log(p.R)
    theta = np.linalg.norm(phi)
    if np.pi - theta < 1e-9:
        raise DegenerateRotationError(f"rotation angle {theta!r} is at pi")
    rho = so3_left_jacobian_inv(phi) @ p.t
    return np.concatenate([rho, phi])


def interpolate(p: Pose, s: float) -> Pose:
    """``exp(s * log(p))``.  Values of ``s`` outside ``[0, 1]`` extrapolate."""
    if s == 0:
        return Pose()
    if s == 1:
        return p
    return exp(s * log(p))


def adjoint(p: Pose) -> np.ndarray:
    """6x6 adjoint with ``p ⊕ exp(xi) ⊕ p⁻¹ == exp(adjoint(p) @ xi)``."""
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = p.R
    Ad[3:, 3:] = p.R
    Ad[:3, 3:] = hat(p.t) @ p.R
    return Ad


# Batched helpers on stacks of 4x4 homogeneous matrices, used by the graph solver.


def batch_inverse(T):
    T = np.asarray(T, dtype=float)
    out = np.zeros_like(T)
    Rt = np.swapaxes(T[..., :3, :3], -1, -2)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Rt, T[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def batch_log(T):
    T = np.asarray(T, dtype=float)
    phi = so3_log(T[..., :3, :3])
    rho = np.einsum("...ij,...j->...i", so3_left_jacobian_inv(phi), T[..., :3, 3])
    return np.concatenate([rho, phi], axis=-1)


def batch_exp(xi):
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[..., :3], xi[..., 3:]
    T = np.zeros(xi.shape[:-1] + (4, 4))
    T[..., :3, :3] = so3_exp(phi)
    T[..., :3, 3] = np.einsum("...ij,...j->...i", so3_left_jacobian(phi), rho)
    T[..., 3, 3] = 1.0
    return T


def batch_adjoint(T):
    T = np.asarray(T, dtype=float)
    R = T[..., :3, :3]
    Ad = np.zeros(T.shape[:-2] + (6, 6))
    Ad[..., :3, :3] = R
    Ad[..., 3:, 3:] = R
    Ad[..., :3, 3:] = hat(T[..., :3, 3]) @ R
    return Ad
