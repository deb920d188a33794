"""Keyframe graph maintenance: temporally-windowed local bundle adjustment,
full bundle adjustment, keyframe culling, and landmark triangulation.

Local BA optimizes the last N keyframes by temporal order plus the
landmarks they observe; covisible keyframes outside that window and the
keyframe just before it (which anchors the inertial chain) contribute
residuals but stay fixed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalFailureError
from ..manifold import RigidPose
from ..preintegration import ImuNoiseModel, NavState, PreintegratedImu
from .factors import (
    HUBER_DELTA_BIAS,
    HUBER_DELTA_IMU,
    Landmark,
    Observation,
    PinholeCamera,
    huber_cost,
    huber_weight,
    imu_residual,
    reprojection_batch,
    retract,
)

POSE_COLS = np.array([0, 1, 2, 6, 7, 8])  # [dtheta, dp] columns of a 15-dim block


@dataclass
class Keyframe:
    id: int
    state: NavState
    observations: list[Observation] = field(default_factory=list)
    pre_from_prev: PreintegratedImu | None = None  # spans (previous keyframe, this)


@dataclass
class KeyframeGraph:
    camera: PinholeCamera
    t_cb: RigidPose
    gravity: np.ndarray
    noise: ImuNoiseModel
    n_local: int = 10
    keyframes: dict[int, Keyframe] = field(default_factory=dict)
    landmarks: dict[int, Landmark] = field(default_factory=dict)

    def ordered_ids(self) -> list[int]:
        return sorted(self.keyframes, key=lambda i: self.keyframes[i].state.timestamp)

    def insert(self, kf: Keyframe) -> None:
        self.keyframes[kf.id] = kf

    def covisibility_edges(self) -> dict[tuple[int, int], int]:
        """Shared-landmark counts between keyframe pairs."""
        seen: dict[int, set[int]] = {}
        for kid, kf in self.keyframes.items():
            seen[kid] = {o.landmark_id for o in kf.observations if o.landmark_id in self.landmarks}
        edges: dict[tuple[int, int], int] = {}
        ids = sorted(seen)
        for a in range(len(ids)):
            for b in range(a + 1, len(ids)):
                count = len(seen[ids[a]] & seen[ids[b]])
                if count:
                    edges[(ids[a], ids[b])] = count
        return edges

    def landmark_observers(self) -> dict[int, list[int]]:
        obs: dict[int, list[int]] = {}
        for kid in self.ordered_ids():
            for o in self.keyframes[kid].observations:
                if o.landmark_id in self.landmarks:
                    obs.setdefault(o.landmark_id, []).append(kid)
        return obs

    def max_consecutive_gap(self) -> float:
        ids = self.ordered_ids()
        times = [self.keyframes[i].state.timestamp for i in ids]
        return max((t1 - t0 for t0, t1 in zip(times, times[1:])), default=0.0)


@dataclass
class BundleAdjustReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    diverged: bool = False


def _bundle_adjust(
    graph: KeyframeGraph,
    opt_ids: list[int],
    fixed_ids: list[int],
    imu_pairs: list[tuple[int, int]],
    free_cols: dict[int, np.ndarray],
    max_iters: int,
    tol: float = 1e-10,
    divergence_limit: int | None = None,
) -> BundleAdjustReport:
    """Shared Gauss-Newton core with landmark Schur elimination.

    Optimizes the states of opt_ids and every landmark with at least two
    observations among (opt_ids + fixed_ids) that is seen from opt_ids;
    fixed keyframes contribute residuals only. imu_pairs lists consecutive
    keyframe pairs whose preintegration terms enter the cost.
    """
    kfs = graph.keyframes
    observers: dict[int, list[int]] = {}
    for kid in opt_ids + fixed_ids:
        for o in kfs[kid].observations:
            if o.landmark_id in graph.landmarks:
                observers.setdefault(o.landmark_id, []).append(kid)
    opt_set = set(opt_ids)
    lm_ids = sorted(
        lid
        for lid, ks in observers.items()
        if len(ks) >= 2 and any(k in opt_set for k in ks)
    )
    lm_index = {lid: k for k, lid in enumerate(lm_ids)}
    n_lm = len(lm_ids)

    offsets: dict[int, int] = {}
    cursor = 0
    for kid in opt_ids:
        offsets[kid] = cursor
        cursor += free_cols[kid].shape[0]
    n_pose = cursor

    # per-keyframe observation arrays restricted to optimized landmarks
    frame_arrays: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = {}
    for kid in opt_ids + fixed_ids:
        rows = [o for o in kfs[kid].observations if o.landmark_id in lm_index]
        if not rows:
            continue
        frame_arrays[kid] = (
            np.array([lm_index[o.landmark_id] for o in rows]),
            np.stack([np.asarray(o.pixel, dtype=float) for o in rows]),
            np.stack([np.asarray(o.info, dtype=float) for o in rows]),
        ) + (np.array([o.landmark_id for o in rows]),)

    def assemble(states: dict[int, NavState], lm_pos: np.ndarray):
        h_pp = np.zeros((n_pose, n_pose))
        g_p = np.zeros(n_pose)
        h_ll = np.zeros((n_lm, 3, 3))
        g_l = np.zeros((n_lm, 3))
        h_pl = np.zeros((n_pose, 3 * n_lm))
        cost = 0.0

        for kid, (lidx, pix, inf, lids) in frame_arrays.items():
            batch = reprojection_batch(
                states[kid], lm_pos[lidx], pix, inf, lids, graph.camera, graph.t_cb
            )
            if batch.residuals.shape[0] == 0:
                continue
            # reprojection_batch drops behind-camera rows; re-derive indices
            li = np.array([lm_index[l] for l in batch.landmark_ids])
            w_info = batch.weighted_info()
            b_jac = batch.j_landmark
            cost += batch.robust_cost
            htt = np.einsum("nia,nij,njb->nab", b_jac, w_info, b_jac)
            np.add.at(h_ll, li, htt)
            np.add.at(g_l, li, np.einsum("nia,nij,nj->na", b_jac, w_info, batch.residuals))
            if kid in opt_set:
                a_jac = batch.pose_jacobian()  # (n, 2, 6)
                h66 = np.einsum("nia,nij,njb->ab", a_jac, w_info, a_jac)
                g6 = np.einsum("nia,nij,nj->a", a_jac, w_info, batch.residuals)
                cols = free_cols[kid]
                sel = np.array([np.where(cols == c)[0][0] if c in cols else -1 for c in POSE_COLS])
                use = sel >= 0
                off = offsets[kid]
                idx = off + sel[use]
                h_pp[np.ix_(idx, idx)] += h66[np.ix_(use, use)]
                g_p[idx] += g6[use]
                cross = np.einsum("nia,nij,njb->nab", a_jac, w_info, b_jac)  # (n, 6, 3)
                for row_local, row_global in zip(np.nonzero(use)[0], idx):
                    np.add.at(
                        h_pl[row_global].reshape(n_lm, 3), li, cross[:, row_local, :]
                    )

        for ki, kj in imu_pairs:
            pre = kfs[kj].pre_from_prev
            fac = imu_residual(states[ki], states[kj], pre, graph.gravity, graph.noise)
            for res, j_i, j_j, info, delta in (
                (fac.residual, fac.j_i, fac.j_j, fac.info, HUBER_DELTA_IMU),
                (fac.residual_bias, fac.jb_i, fac.jb_j, fac.info_bias, HUBER_DELTA_BIAS),
            ):
                chi2 = float(res @ info @ res)
                w = huber_weight(np.sqrt(max(chi2, 0.0)), delta)
                cost += huber_cost(chi2, delta)
                wi = w * info
                blocks = []
                if ki in opt_set:
                    blocks.append((offsets[ki], j_i[:, free_cols[ki]]))
                if kj in opt_set:
                    blocks.append((offsets[kj], j_j[:, free_cols[kj]]))
                for off_a, j_a in blocks:
                    g_p[off_a : off_a + j_a.shape[1]] += j_a.T @ wi @ res
                    for off_b, j_b in blocks:
                        h_pp[off_a : off_a + j_a.shape[1], off_b : off_b + j_b.shape[1]] += (
                            j_a.T @ wi @ j_b
                        )
        return h_pp, g_p, h_ll, g_l, h_pl, cost

    def solve_step(h_pp, g_p, h_ll, g_l, h_pl):
        damped = h_ll + 1e-12 * np.eye(3)
        try:
            h_ll_inv = np.linalg.inv(damped)
        except np.linalg.LinAlgError as exc:
            raise NumericalFailureError("landmark block is singular") from exc
        # S = Hpp - Hpl Hll^-1 Hlp ; rhs = -gp + Hpl Hll^-1 gl  (BLAS shapes)
        hpl_batched = h_pl.reshape(n_pose, n_lm, 3).transpose(1, 0, 2)  # (M, P, 3)
        tmp = hpl_batched @ h_ll_inv  # (M, P, 3)
        tmp_flat = tmp.transpose(1, 0, 2).reshape(n_pose, 3 * n_lm)
        s_mat = h_pp - tmp_flat @ h_pl.T
        rhs = -g_p + tmp_flat @ g_l.ravel()
        d = np.sqrt(np.clip(np.diag(s_mat), 1e-300, None))
        try:
            dp = np.linalg.solve(s_mat / d[:, None] / d[None, :], rhs / d) / d
        except np.linalg.LinAlgError as exc:
            raise NumericalFailureError("pose system is singular") from exc
        rhs_l = -g_l - (dp @ h_pl).reshape(n_lm, 3)
        dl = np.einsum("nab,nb->na", h_ll_inv, rhs_l)
        return dp, dl

    states = {kid: kfs[kid].state for kid in opt_ids + fixed_ids}
    lm_pos = np.stack([graph.landmarks[l].position for l in lm_ids]) if n_lm else np.zeros((0, 3))
    h_pp, g_p, h_ll, g_l, h_pl, cost = assemble(states, lm_pos)
    initial_cost = cost
    iterations = 0
    bad_streak = 0
    diverged = False
    converged = False
    for _ in range(max_iters):
        iterations += 1
        dp, dl = solve_step(h_pp, g_p, h_ll, g_l, h_pl)
        alpha = 1.0
        improved = False
        for _ in range(8):
            cand_states = dict(states)
            for kid in opt_ids:
                delta = np.zeros(15)
                delta[free_cols[kid]] = alpha * dp[offsets[kid] : offsets[kid] + free_cols[kid].shape[0]]
                cand_states[kid] = retract(states[kid], delta)
            cand_lm = lm_pos + alpha * dl
            out = assemble(cand_states, cand_lm)
            if out[5] <= cost * (1.0 + 1e-12) + 1e-15:
                states, lm_pos = cand_states, cand_lm
                h_pp, g_p, h_ll, g_l, h_pl, cost = out
                improved = True
                break
            alpha *= 0.5
        if not improved:
            bad_streak += 1
            if divergence_limit is not None and bad_streak >= divergence_limit:
                diverged = True
            break
        bad_streak = 0
        if np.linalg.norm(alpha * dp) < tol and (n_lm == 0 or np.abs(alpha * dl).max() < tol):
            converged = True
            break

    for kid in opt_ids:
        kfs[kid].state = states[kid]
    for k, lid in enumerate(lm_ids):
        graph.landmarks[lid].position = lm_pos[k]
    return BundleAdjustReport(iterations, initial_cost, cost, converged, diverged)


def local_bundle_adjustment(
    graph: KeyframeGraph, newest_kf_id: int, max_iters: int = 10
) -> BundleAdjustReport:
    """Optimize the last n_local keyframes and their landmarks; the keyframe
    preceding the window and covisible older keyframes stay fixed."""
    ids = graph.ordered_ids()
    if newest_kf_id != ids[-1]:
        raise ValueError("newest_kf_id must be the most recent keyframe")
    local = ids[-graph.n_local :]
    older = [i for i in ids if i not in local]
    fixed = list(older[-1:])  # the keyframe just before the window anchors the IMU chain

    local_lms = {
        o.landmark_id
        for kid in local
        for o in graph.keyframes[kid].observations
        if o.landmark_id in graph.landmarks
    }
    for kid in older[:-1]:
        if any(o.landmark_id in local_lms for o in graph.keyframes[kid].observations):
            fixed.append(kid)

    imu_pairs = [
        (a, b)
        for a, b in zip(ids, ids[1:])
        if b in local and (a in local or a in fixed) and graph.keyframes[b].pre_from_prev is not None
    ]
    free = {kid: np.arange(15) for kid in local}
    if not older:
        # no anchor outside the window: pin the first keyframe's pose gauge
        free[local[0]] = np.array([3, 4, 5, 9, 10, 11, 12, 13, 14])
    return _bundle_adjust(graph, local, fixed, imu_pairs, free, max_iters)


def full_bundle_adjustment(
    graph: KeyframeGraph, max_iters: int = 100, divergence_limit: int = 3
) -> BundleAdjustReport:
    """Joint optimization of all keyframe states and landmarks; the first
    keyframe's pose is held fixed to pin the position and yaw gauge.

    Stops early and reports divergence after ``divergence_limit``
    consecutive iterations without cost decrease.
    """
    ids = graph.ordered_ids()
    imu_pairs = [
        (a, b)
        for a, b in zip(ids, ids[1:])
        if graph.keyframes[b].pre_from_prev is not None
    ]
    free = {kid: np.arange(15) for kid in ids}
    free[ids[0]] = np.array([3, 4, 5, 9, 10, 11, 12, 13, 14])  # velocity and biases only
    return _bundle_adjust(graph, ids, [], imu_pairs, free, max_iters,
                          divergence_limit=divergence_limit)


def keyframe_culling_check(
    graph: KeyframeGraph,
    candidate_id: int,
    redundancy_fraction: float = 0.9,
    min_other_observers: int = 3,
    local_gap: float = 0.5,
    global_gap: float = 3.0,
) -> bool:
    """True when the keyframe may be discarded: redundant observations and
    the gap left behind respects the local/global temporal limits."""
    ids = graph.ordered_ids()
    pos = ids.index(candidate_id)
    if pos == 0 or pos == len(ids) - 1:
        return False

    observers = graph.landmark_observers()
    own = [
        o.landmark_id
        for o in graph.keyframes[candidate_id].observations
        if o.landmark_id in graph.landmarks
    ]
    if not own:
        redundant = True
    else:
        well_covered = sum(
            1
            for lid in own
            if len([k for k in observers.get(lid, []) if k != candidate_id]) >= min_other_observers
        )
        redundant = well_covered >= redundancy_fraction * len(own)
    if not redundant:
        return False

    t_prev = graph.keyframes[ids[pos - 1]].state.timestamp
    t_next = graph.keyframes[ids[pos + 1]].state.timestamp
    gap = t_next - t_prev
    in_local = candidate_id in ids[-graph.n_local :]
    limit = local_gap if in_local else global_gap
    return gap <= limit


def cull_redundant_keyframes(graph: KeyframeGraph, reintegrate) -> list[int]:
    """Sequentially discard redundant keyframes, oldest first, re-checking
    gaps after each removal. ``reintegrate(t0, t1)`` must supply the merged
    preintegration for the gap a removal leaves behind. Returns removed ids."""
    removed: list[int] = []
    changed = True
    while changed:
        changed = False
        ids = graph.ordered_ids()
        for kid in ids[1:-1]:
            if keyframe_culling_check(graph, kid):
                pos = graph.ordered_ids().index(kid)
                prev_id = graph.ordered_ids()[pos - 1]
                next_id = graph.ordered_ids()[pos + 1]
                t0 = graph.keyframes[prev_id].state.timestamp
                t1 = graph.keyframes[next_id].state.timestamp
                graph.keyframes[next_id].pre_from_prev = reintegrate(t0, t1)
                del graph.keyframes[kid]
                removed.append(kid)
                changed = True
                break
    return removed


def triangulate_point(
    poses_wc: list[tuple[np.ndarray, np.ndarray]],
    pixels: np.ndarray,
    camera: PinholeCamera,
) -> np.ndarray:
    """Linear multi-view triangulation from camera poses (R_WC, p_WC)."""
    rows = []
    for (r_wc, p_wc), pix in zip(poses_wc, pixels):
        r_cw = r_wc.T
        t_cw = -r_cw @ p_wc
        p_mat = np.zeros((3, 4))
        p_mat[:3, :3] = r_cw
        p_mat[:3, 3] = t_cw
        k = np.array([[camera.fu, 0, camera.cu], [0, camera.fv, camera.cv], [0, 0, 1.0]])
        p_mat = k @ p_mat
        rows.append(pix[0] * p_mat[2] - p_mat[0])
        rows.append(pix[1] * p_mat[2] - p_mat[1])
    a = np.stack(rows)
    _, _, vt = np.linalg.svd(a)
    x_h = vt[-1]
    if abs(x_h[3]) < 1e-12:
        raise NumericalFailureError("triangulation is degenerate (point at infinity)")
    return x_h[:3] / x_h[3]
