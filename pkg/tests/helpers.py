"""Shared test utilities and independent oracles."""
import numpy as np
import scipy.linalg
from hypothesis import strategies as st

from scanweave.se3 import Pose


def random_pose(rng, max_t=1.0, max_angle=np.pi / 2) -> Pose:
    d = rng.normal(size=3)
    a = rng.normal(size=3)
    t = d / np.linalg.norm(d) * rng.uniform(0, max_t)
    phi = a / np.linalg.norm(a) * rng.uniform(0, max_angle)
    return Pose.from_rotvec(phi, t)


def matrix_log_twist(T) -> np.ndarray:
    """Twist of a 4x4 transform via the general matrix logarithm."""
    L = np.real(scipy.linalg.logm(np.asarray(T, dtype=float)))
    return np.array([L[0, 3], L[1, 3], L[2, 3], L[2, 1], L[0, 2], L[1, 0]])


def brute_nn(points, q):
    """Linear scan; ties go to the lowest index."""
    d = np.linalg.norm(points - q, axis=1)
    i = int(np.argmin(d))
    return i, float(d[i])


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)


@st.composite
def poses(draw, max_t=20.0, max_angle=3.0):
    axis = draw(st.tuples(*[st.floats(-1, 1)] * 3).map(np.array))
    n = np.linalg.norm(axis)
    angle = draw(st.floats(0, max_angle))
    phi = axis / n * angle if n > 1e-3 else np.zeros(3)
    t = draw(st.tuples(*[st.floats(-max_t, max_t)] * 3).map(np.array))
    return Pose.from_rotvec(phi, t)
