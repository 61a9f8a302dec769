"""Relative-pose graph with fixed nodes, optimized by Levenberg-Marquardt.

Edge error for a measurement ``z`` of node ``i`` in the frame of node ``j``::

    e = log(z⁻¹ ⊕ x_j⁻¹ ⊕ x_i)

Node updates are right-multiplicative, ``x <- x ⊕ exp(dx)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import se3
from .se3 import Pose

log = logging.getLogger(__name__)

DEFAULT_LM_ITERS = 15
LAMBDA_INIT = 1e-4
LAMBDA_MAX = 1e8


class GraphError(ValueError):
    """Structural misuse of a :class:`PoseGraph`."""


class OptimizationError(RuntimeError):
    """The damped normal equations stayed singular up to the maximum damping."""


@dataclass
class GraphNode:
    id: int
    pose: Pose
    fixed: bool = False


@dataclass
class Constraint:
    source: int  # the newer scan i
    target: int  # the keyframe j
    measurement: Pose
    information: np.ndarray

    def __post_init__(self):
        if self.source == self.target:
            raise GraphError("constraint endpoints must differ")
        info = np.asarray(self.information, dtype=float)
        if info.shape != (6, 6):
            raise GraphError(f"information must be 6x6, got {info.shape}")
        self.information = 0.5 * (info + info.T)


@dataclass
class LMSummary:
    initial_chi2: float
    final_chi2: float
    iterations: int
    accepted: int
    chi2_history: list[float] = field(default_factory=list)


def error(x_i: Pose, x_j: Pose, z_ij: Pose) -> np.ndarray:
    return se3.log(z_ij.inverse() @ (x_j.inverse() @ x_i))


def error_jacobians(x_i: Pose, x_j: Pose, z_ij: Pose):
    """Analytic ``(de/ddx_i, de/ddx_j)`` for right perturbations of both poses."""
    e = error(x_i, x_j, z_ij)
    A = se3.se3_right_jacobian_inv(e)
    B = -A @ se3.adjoint(x_i.inverse() @ x_j)
    return A, B


class PoseGraph:
    def __init__(self):
        self.nodes: dict[int, GraphNode] = {}
        self.constraints: list[Constraint] = []

    def __len__(self):
        return len(self.nodes)

    def copy(self) -> PoseGraph:
        g = PoseGraph()
        g.nodes = {k: GraphNode(n.id, n.pose, n.fixed) for k, n in self.nodes.items()}
        g.constraints = list(self.constraints)
        return g

    # structure

    def add_node(self, node_id: int, pose: Pose, fixed: bool = False) -> GraphNode:
        if node_id in self.nodes:
            raise GraphError(f"node {node_id} already exists")
        node = GraphNode(node_id, pose, fixed)
        self.nodes[node_id] = node
        return node

    def fix_node(self, node_id: int) -> None:
        self._node(node_id).fixed = True

    def add_constraint(self, c: Constraint) -> None:
        for nid in (c.source, c.target):
            if nid not in self.nodes:
                raise GraphError(f"constraint references unknown node {nid}")
        self.constraints.append(c)

    def remove_node(self, node_id: int) -> GraphNode:
        """Remove a fixed node that no constraint references any more."""
        node = self._node(node_id)
        if not node.fixed:
            raise GraphError(f"node {node_id} is active; fix it before removal")
        if any(node_id in (c.source, c.target) for c in self.constraints):
            raise GraphError(f"node {node_id} is still referenced by a constraint")
        return self.nodes.pop(node_id)

    def drop_fixed_constraints(self) -> int:
        """Drop constraints whose endpoints are both fixed; returns the count."""
        keep = [
            c for c in self.constraints
            if not (self.nodes[c.source].fixed and self.nodes[c.target].fixed)
        ]
        dropped = len(self.constraints) - len(keep)
        self.constraints = keep
        return dropped

    def referenced(self) -> set[int]:
        return {n for c in self.constraints for n in (c.source, c.target)}

    def active_ids(self) -> list[int]:
        return sorted(k for k, n in self.nodes.items() if not n.fixed)

    def fixed_ids(self) -> list[int]:
        return sorted(k for k, n in self.nodes.items() if n.fixed)

    def pose(self, node_id: int) -> Pose:
        return self._node(node_id).pose

    def _node(self, node_id):
        try:
            return self.nodes[node_id]
        except KeyError:
            raise GraphError(f"unknown node {node_id}") from None

    # objective

    def chi2(self) -> float:
        return sum(
            float(e @ c.information @ e)
            for c in self.constraints
            for e in [error(self.pose(c.source), self.pose(c.target), c.measurement)]
        )

    def optimize(self, iterations: int = DEFAULT_LM_ITERS) -> LMSummary:
        """Run ``iterations`` LM solves in place; fixed nodes are never touched.

        Each solve counts against the budget whether its step is accepted or
        rejected.  A step is accepted only if it lowers chi2.
        """
        active = self.active_ids()
        if self.nodes and not self.fixed_ids():
            raise GraphError("at least one node must be fixed")
        problem = _Problem(self, active)
        chi2 = problem.chi2(problem.poses)
        summary = LMSummary(chi2, chi2, 0, 0, [chi2])
        if not active or not self.constraints:
            return summary

        lam = LAMBDA_INIT
        poses = problem.poses
        n = len(active)
        it = 0
        while it < iterations:
            H, g = problem.normal_equations(poses)
            if not np.any(g):
                break
            step = None
            while step is None:
                try:
                    cf = scipy.linalg.cho_factor(H + lam * np.eye(6 * n), check_finite=False)
                    step = -scipy.linalg.cho_solve(cf, g, check_finite=False)
                    if not np.all(np.isfinite(step)):
                        raise np.linalg.LinAlgError
                except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
                    step = None
                    lam *= 10
                    if lam > LAMBDA_MAX:
                        raise OptimizationError(
                            "damped system singular up to lambda=1e8"
                        ) from None
            it += 1
            cand = poses.copy()
            cand[problem.active_rows] = poses[problem.active_rows] @ se3.batch_exp(step.reshape(n, 6))
            new_chi2 = problem.chi2(cand)
            if new_chi2 < chi2:
                poses, chi2 = cand, new_chi2
                summary.accepted += 1
                summary.chi2_history.append(chi2)
                lam = max(lam / 10, 1e-12)
            else:
                lam *= 10
                if lam > LAMBDA_MAX:
                    break
        summary.iterations = it
        summary.final_chi2 = chi2
        for row, nid in enumerate(problem.ids):
            if not self.nodes[nid].fixed:
                self.nodes[nid].pose = _to_pose(poses[row])
        return summary

    # text dump

    def dumps(self) -> str:
        """``NODE``/``EDGE`` lines; quaternions are Hamilton ``qx qy qz qw``."""
        lines = []
        for nid in sorted(self.nodes):
            n = self.nodes[nid]
            lines.append("NODE %d %s %d" % (nid, _fmt_pose(n.pose), int(n.fixed)))
        iu = np.triu_indices(6)
        for c in self.constraints:
            info = " ".join(repr(float(v)) for v in c.information[iu])
            lines.append("EDGE %d %d %s %s" % (c.source, c.target, _fmt_pose(c.measurement), info))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> PoseGraph:
        g = cls()
        iu = np.triu_indices(6)
        for ln, line in enumerate(text.splitlines(), 1):
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "NODE" and len(tok) == 10:
                pose = _parse_pose(tok[2:9])
                g.add_node(int(tok[1]), pose, fixed=bool(int(tok[9])))
            elif tok[0] == "EDGE" and len(tok) == 31:
                info = np.zeros((6, 6))
                info[iu] = [float(v) for v in tok[10:31]]
                info = info + np.triu(info, 1).T
                g.add_constraint(Constraint(int(tok[1]), int(tok[2]), _parse_pose(tok[3:10]), info))
            else:
                raise GraphError(f"line {ln}: malformed record {line!r}")
        return g


def optimize(graph: PoseGraph, iterations: int = DEFAULT_LM_ITERS) -> PoseGraph:
    """Functional wrapper: optimize a copy and return it."""
    out = graph.copy()
    out.optimize(iterations)
    return out


def chi2(graph: PoseGraph) -> float:
    return graph.chi2()


def _fmt_pose(p: Pose) -> str:
    q = p.quaternion()
    return " ".join(repr(float(v)) for v in (*p.t, *q))


def _parse_pose(tok) -> Pose:
    v = [float(x) for x in tok]
    return Pose.from_quaternion(v[3:7], v[0:3])


def _to_pose(T) -> Pose:
    R = T[:3, :3]
    if np.linalg.norm(R.T @ R - np.eye(3)) > se3.ORTHO_TOL:
        R = se3.orthonormalize(R)
    return Pose(R, T[:3, 3])


class _Problem:
    """Vectorized edge data for one optimize() call."""

    def __init__(self, graph: PoseGraph, active: list[int]):
        self.ids = sorted(graph.nodes)
        row = {nid: k for k, nid in enumerate(self.ids)}
        col = {nid: k for k, nid in enumerate(active)}
        self.poses = np.stack([graph.nodes[n].pose.as_matrix() for n in self.ids]) if self.ids else np.zeros((0, 4, 4))
        self.active_rows = np.array([row[n] for n in active], dtype=int)
        cs = graph.constraints
        self.src = np.array([row[c.source] for c in cs], dtype=int)
        self.dst = np.array([row[c.target] for c in cs], dtype=int)
        self.src_col = np.array([col.get(c.source, -1) for c in cs], dtype=int)
        self.dst_col = np.array([col.get(c.target, -1) for c in cs], dtype=int)
        self.z_inv = np.stack([se3.batch_inverse(c.measurement.as_matrix()) for c in cs]) if cs else np.zeros((0, 4, 4))
        self.info = np.stack([c.information for c in cs]) if cs else np.zeros((0, 6, 6))
        self.n = len(active)

    def errors(self, poses):
        Xi, Xj = poses[self.src], poses[self.dst]
        rel = se3.batch_inverse(Xj) @ Xi
        return se3.batch_log(self.z_inv @ rel), rel

    def chi2(self, poses) -> float:
        if len(self.src) == 0:
            return 0.0
        e, _ = self.errors(poses)
        return float(np.einsum("ei,eij,ej->", e, self.info, e))

    def normal_equations(self, poses):
        e, rel = self.errors(poses)
        A = se3.se3_right_jacobian_inv(e)
        B = -A @ se3.batch_adjoint(se3.batch_inverse(rel))
        AtO = np.swapaxes(A, 1, 2) @ self.info
        BtO = np.swapaxes(B, 1, 2) @ self.info
        Oe = np.einsum("eij,ej->ei", self.info, e)
        blocks = {
            ("s", "s"): AtO @ A, ("s", "d"): AtO @ B,
            ("d", "s"): BtO @ A, ("d", "d"): BtO @ B,
        }
        grads = {"s": np.einsum("eji,ej->ei", A, Oe), "d": np.einsum("eji,ej->ei", B, Oe)}
        cols = {"s": self.src_col, "d": self.dst_col}
        n = self.n
        H = np.zeros((n, 6, n, 6))
        g = np.zeros((n, 6))
        for a in "sd":
            ma = cols[a] >= 0
            np.add.at(g, cols[a][ma], grads[a][ma])
            for b in "sd":
                m = ma & (cols[b] >= 0)
                np.add.at(H, (cols[a][m], slice(None), cols[b][m]), blocks[(a, b)][m])
        return H.reshape(6 * n, 6 * n), g.reshape(6 * n)
