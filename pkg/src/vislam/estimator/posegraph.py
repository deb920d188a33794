"""6-DoF pose-graph optimization for loop closing.

Edges constrain relative rigid poses; scale stays fixed because inertial
sensing makes it observable. After optimization, keyframe velocities are
rotated by each keyframe's orientation correction; biases are untouched.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalFailureError
from ..manifold import (
    RigidPose,
    se3_adjoint,
    se3_exp,
    se3_left_jacobian,
    se3_log,
)
from ..preintegration import NavState


@dataclass
class PoseGraphEdge:
    """Relative-pose constraint T_ij between keyframes i and j."""

    i: int
    j: int
    relative: RigidPose
    information: np.ndarray = field(default_factory=lambda: np.eye(6))
    is_loop: bool = False


def edge_residual(
    t_i: RigidPose, t_j: RigidPose, edge: PoseGraphEdge
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual Log(T_edge^-1 T_i^-1 T_j) with Jacobians wrt right
    perturbations of T_i and T_j."""
    mid = t_i.inverse().compose(t_j)
    err_pose = edge.relative.inverse().compose(mid)
    res = se3_log(err_pose)
    jr_inv = np.linalg.inv(se3_left_jacobian(-res))  # right Jacobian inverse
    j_j = jr_inv
    j_i = -jr_inv @ se3_adjoint(mid.inverse())
    return res, j_i, j_j


def pose_graph_optimize(
    poses: list[RigidPose],
    edges: list[PoseGraphEdge],
    anchor: int = 0,
    max_iters: int = 50,
    tol: float = 1e-14,
) -> list[RigidPose]:
    """Gauss-Newton over keyframe rigid poses with one pose anchored.

    Raises on a disconnected graph (states untouched by any edge path from
    the anchor would be unobservable).
    """
    n = len(poses)
    if n == 0:
        return []
    adj: dict[int, set[int]] = {k: set() for k in range(n)}
    for e in edges:
        adj[e.i].add(e.j)
        adj[e.j].add(e.i)
    reached = {anchor}
    stack = [anchor]
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt not in reached:
                reached.add(nxt)
                stack.append(nxt)
    if len(reached) != n:
        raise ValueError("pose graph is disconnected from the anchor")

    # free-state index map excluding the anchored pose
    index = {}
    cursor = 0
    for k in range(n):
        if k != anchor:
            index[k] = cursor
            cursor += 6

    def assemble(current: list[RigidPose]):
        h = np.zeros((cursor, cursor))
        g = np.zeros(cursor)
        cost = 0.0
        for e in edges:
            res, j_i, j_j = edge_residual(current[e.i], current[e.j], e)
            cost += float(res @ e.information @ res)
            blocks = []
            if e.i != anchor:
                blocks.append((index[e.i], j_i))
            if e.j != anchor:
                blocks.append((index[e.j], j_j))
            for off_a, j_a in blocks:
                g[off_a : off_a + 6] += j_a.T @ e.information @ res
                for off_b, j_b in blocks:
                    h[off_a : off_a + 6, off_b : off_b + 6] += j_a.T @ e.information @ j_b
        return h, g, cost

    current = list(poses)
    h, g, cost = assemble(current)
    for _ in range(max_iters):
        d = np.sqrt(np.clip(np.diag(h), 1e-300, None))
        try:
            step = np.linalg.solve(h / d[:, None] / d[None, :], -g / d) / d
        except np.linalg.LinAlgError as exc:
            raise NumericalFailureError("pose-graph normal equations singular") from exc
        alpha = 1.0
        improved = False
        for _ in range(8):
            cand = list(current)
            for k, off in index.items():
                cand[k] = current[k].compose(se3_exp(alpha * step[off : off + 6]))
            h_try, g_try, cost_try = assemble(cand)
            if cost_try <= cost * (1.0 + 1e-12) + 1e-18:
                current, h, g, cost = cand, h_try, g_try, cost_try
                improved = True
                break
            alpha *= 0.5
        if not improved:
            break
        if np.linalg.norm(alpha * step) < tol:
            break
    return current


def correct_velocities_after_loop(
    states: list[NavState],
    old_rotations: list[np.ndarray],
    new_rotations: list[np.ndarray],
) -> list[NavState]:
    """Rotate each velocity by its keyframe's orientation correction
    R_new R_old^T; biases are left untouched."""
    from dataclasses import replace

    out = []
    for state, r_old, r_new in zip(states, old_rotations, new_rotations):
        r_corr = r_new @ r_old.T
        out.append(replace(state, velocity=r_corr @ state.velocity))
    return out


def rigid_align_points(points_a: np.ndarray, points_b: np.ndarray) -> RigidPose:
    """Closed-form rigid transform T with points_a ~ T(points_b).

    Used to turn matched 3D points between a revisited keyframe pair into
    a loop-edge relative pose.
    """
    a = np.asarray(points_a, dtype=float)
    b = np.asarray(points_b, dtype=float)
    if a.shape != b.shape or a.shape[0] < 3:
        raise ValueError("need at least 3 matched points")
    mu_a = a.mean(axis=0)
    mu_b = b.mean(axis=0)
    cov = (a - mu_a).T @ (b - mu_b) / a.shape[0]
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u @ vt) < 0:
        s[2, 2] = -1.0
    rot = u @ s @ vt
    return RigidPose(rot, mu_a - rot @ mu_b)
