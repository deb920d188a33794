"""Fixed-lag frame tracking with a marginalization prior.

The tracker alternates two optimizations: right after a map update the
current frame is linked to the last keyframe (landmarks and keyframe
fixed), and the resulting state plus Hessian become a prior; afterwards
each new frame is optimized jointly with its predecessor, which is then
marginalized out by Schur complement to form the next prior.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from ..errors import NumericalFailureError, TrackingLostError
from ..manifold import RigidPose
from ..preintegration import ImuNoiseModel, NavState, PreintegratedImu
from .factors import (
    HUBER_DELTA_BIAS,
    HUBER_DELTA_IMU,
    HUBER_DELTA_PRIOR,
    Landmark,
    Observation,
    PinholeCamera,
    huber_cost,
    huber_weight,
    imu_residual,
    prior_residual,
    reprojection_batch,
    retract,
)


@dataclass
class MarginalPrior:
    """Gaussian prior on one frame: linearization state plus information."""

    mean: NavState
    information: np.ndarray  # 15x15, ordering [dtheta, dv, dp, dbg, dba]


def check_information_psd(info: np.ndarray, what: str = "information") -> np.ndarray:
    """Symmetrize and verify positive semi-definiteness; clamps roundoff."""
    info = 0.5 * (info + info.T)
    w, v = np.linalg.eigh(info)
    floor = -1e-8 * max(w[-1], 1.0)
    if w[0] < floor:
        raise NumericalFailureError(f"{what} matrix is not PSD (min eig {w[0]:.3e})")
    if w[0] < 0.0:
        info = (v * np.clip(w, 0.0, None)) @ v.T
    return info


def _observation_arrays(
    observations: list[Observation], landmarks: dict[int, Landmark]
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    usable = [o for o in observations if o.landmark_id in landmarks]
    if not usable:
        return np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0, dtype=int)
    pos = np.stack([landmarks[o.landmark_id].position for o in usable])
    pix = np.stack([np.asarray(o.pixel, dtype=float) for o in usable])
    inf = np.stack([np.asarray(o.info, dtype=float) for o in usable])
    ids = np.array([o.landmark_id for o in usable])
    return pos, pix, inf, ids


def _accumulate_reprojection(
    h: np.ndarray,
    g: np.ndarray,
    batch,
    offset: int,
) -> float:
    """Add one frame's vision terms into (h, g); returns robust cost."""
    if batch.residuals.shape[0] == 0:
        return 0.0
    j = batch.pose_jacobian()  # (n, 2, 6) over [theta, pos]
    w_info = batch.weighted_info()
    h6 = np.einsum("nia,nij,njb->ab", j, w_info, j)
    g6 = np.einsum("nia,nij,nj->a", j, w_info, batch.residuals)
    idx = np.r_[offset : offset + 3, offset + 6 : offset + 9]
    h[np.ix_(idx, idx)] += h6
    g[idx] += g6
    return batch.robust_cost


def _add_block_factor(
    h: np.ndarray,
    g: np.ndarray,
    residual: np.ndarray,
    jacobians: list[tuple[int, np.ndarray]],
    info: np.ndarray,
    delta: float,
) -> float:
    """Add a robustified factor with dense per-state Jacobian blocks."""
    chi2 = float(residual @ info @ residual)
    w = huber_weight(np.sqrt(max(chi2, 0.0)), delta)
    wi = w * info
    for off_a, j_a in jacobians:
        g[off_a : off_a + j_a.shape[1]] += j_a.T @ wi @ residual
        for off_b, j_b in jacobians:
            h[off_a : off_a + j_a.shape[1], off_b : off_b + j_b.shape[1]] += j_a.T @ wi @ j_b
    return huber_cost(chi2, delta)


def _solve_normal_equations(h: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Jacobi-preconditioned solve with one round of iterative refinement.

    The information blocks mix scales across nine orders of magnitude
    (preintegration vs pixel terms), so a plain solve loses ~6 digits.
    """
    d = np.sqrt(np.clip(np.diag(h), 1e-300, None))
    hs = h / d[:, None] / d[None, :]
    try:
        y = np.linalg.solve(hs, -g / d)
        step = y / d
        resid = h @ step + g
        step += np.linalg.solve(hs, -resid / d) / d
        return step
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError("normal equations are singular") from exc


def _gauss_newton(x0, assemble, apply_step, max_iters: int, tol: float = 1e-12):
    """Generic damped Gauss-Newton with step halving on cost increase.

    ``assemble(x) -> (H, g, cost)``; ``apply_step(x, delta) -> x``.
    Returns (x, H, cost) with H evaluated at the returned x.
    """
    x = x0
    h, g, cost = assemble(x)
    for _ in range(max_iters):
        step = _solve_normal_equations(h, g)
        alpha = 1.0
        improved = False
        for _ in range(8):
            x_try = apply_step(x, alpha * step)
            h_try, g_try, cost_try = assemble(x_try)
            if cost_try <= cost * (1.0 + 1e-12) + 1e-15:
                x, h, g, cost = x_try, h_try, g_try, cost_try
                improved = True
                break
            alpha *= 0.5
        if not improved:
            break
        if np.linalg.norm(alpha * step) < tol:
            break
    return x, h, cost


def optimize_frame_to_keyframe(
    frame: NavState,
    observations: list[Observation],
    landmarks: dict[int, Landmark],
    last_keyframe: NavState,
    pre: PreintegratedImu,
    gravity: np.ndarray,
    noise: ImuNoiseModel,
    camera: PinholeCamera,
    t_cb: RigidPose,
    max_iters: int = 10,
    min_observations: int = 6,
) -> tuple[NavState, np.ndarray]:
    """Optimize the current frame against the fixed map and the fixed last
    keyframe. Returns the state and the 15x15 Hessian that seeds the prior
    for the next optimization.

    Raises TrackingLostError when fewer than ``min_observations`` usable
    (in-map, in-front-of-camera) observations remain.
    """
    pos, pix, inf, ids = _observation_arrays(observations, landmarks)
    first_batch = reprojection_batch(frame, pos, pix, inf, ids, camera, t_cb)
    if first_batch.residuals.shape[0] < min_observations:
        raise TrackingLostError(
            f"only {first_batch.residuals.shape[0]} usable observations "
            f"(need {min_observations})"
        )

    def assemble(state: NavState):
        h = np.zeros((15, 15))
        g = np.zeros(15)
        cost = 0.0
        batch = reprojection_batch(state, pos, pix, inf, ids, camera, t_cb)
        cost += _accumulate_reprojection(h, g, batch, 0)
        fac = imu_residual(last_keyframe, state, pre, gravity, noise)
        cost += _add_block_factor(h, g, fac.residual, [(0, fac.j_j)], fac.info, HUBER_DELTA_IMU)
        cost += _add_block_factor(
            h, g, fac.residual_bias, [(0, fac.jb_j)], fac.info_bias, HUBER_DELTA_BIAS
        )
        return h, g, cost

    state, h, _ = _gauss_newton(frame, assemble, retract, max_iters)
    return state, h


def optimize_frame_pair_with_prior(
    prev: NavState,
    prior: MarginalPrior,
    curr: NavState,
    observations: list[Observation],
    landmarks: dict[int, Landmark],
    pre: PreintegratedImu,
    gravity: np.ndarray,
    noise: ImuNoiseModel,
    camera: PinholeCamera,
    t_cb: RigidPose,
    max_iters: int = 10,
) -> tuple[NavState, MarginalPrior]:
    """Jointly optimize the previous frame (under its prior) and the current
    frame (vision + preintegration link), then marginalize the previous
    frame by Schur complement to produce the prior for the next step."""
    prior_info = check_information_psd(prior.information, "prior information")
    pos, pix, inf, ids = _observation_arrays(observations, landmarks)

    def assemble(pair: tuple[NavState, NavState]):
        s_prev, s_curr = pair
        h = np.zeros((30, 30))
        g = np.zeros(30)
        cost = 0.0
        batch = reprojection_batch(s_curr, pos, pix, inf, ids, camera, t_cb)
        cost += _accumulate_reprojection(h, g, batch, 15)
        fac = imu_residual(s_prev, s_curr, pre, gravity, noise)
        cost += _add_block_factor(
            h, g, fac.residual, [(0, fac.j_i), (15, fac.j_j)], fac.info, HUBER_DELTA_IMU
        )
        cost += _add_block_factor(
            h,
            g,
            fac.residual_bias,
            [(0, fac.jb_i), (15, fac.jb_j)],
            fac.info_bias,
            HUBER_DELTA_BIAS,
        )
        pfac = prior_residual(s_prev, prior.mean, prior_info)
        cost += _add_block_factor(
            h, g, pfac.residual, [(0, pfac.jacobian)], pfac.info, HUBER_DELTA_PRIOR
        )
        return h, g, cost

    def apply_step(pair, delta):
        return retract(pair[0], delta[:15]), retract(pair[1], delta[15:])

    (s_prev, s_curr), h, _ = _gauss_newton((prev, curr), assemble, apply_step, max_iters)

    h_jj = h[:15, :15]
    h_jc = h[:15, 15:]
    h_cc = h[15:, 15:]
    try:
        marg = h_cc - h_jc.T @ np.linalg.solve(h_jj, h_jc)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailureError("marginalized block is singular") from exc
    marg = check_information_psd(marg, "marginalized prior")
    return s_curr, MarginalPrior(mean=s_curr, information=marg)


def batch_optimize_frames(
    anchor: NavState,
    frames: list[NavState],
    observations: list[list[Observation]],
    landmarks: dict[int, Landmark],
    pres: list[PreintegratedImu],
    gravity: np.ndarray,
    noise: ImuNoiseModel,
    camera: PinholeCamera,
    t_cb: RigidPose,
    max_iters: int = 20,
    tol: float = 1e-12,
) -> list[NavState]:
    """Joint optimization of a whole frame chain against a fixed map.

    The anchor keyframe stays fixed; pres[k] spans (k-1, k) with pres[0]
    linking the anchor to the first frame. Used as the batch reference the
    sliding two-frame estimator is compared against.
    """
    n = len(frames)
    obs_arrays = [_observation_arrays(obs, landmarks) for obs in observations]

    def assemble(states: list[NavState]):
        rows: list[np.ndarray] = []
        cols: list[np.ndarray] = []
        vals: list[np.ndarray] = []
        g = np.zeros(15 * n)
        cost = 0.0

        def add_block(bi: int, bj: int, block: np.ndarray):
            r, c = np.meshgrid(
                np.arange(15 * bi, 15 * bi + block.shape[0]),
                np.arange(15 * bj, 15 * bj + block.shape[1]),
                indexing="ij",
            )
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(block.ravel())

        for k, state in enumerate(states):
            pos, pix, inf, ids = obs_arrays[k]
            if pos.shape[0]:
                batch = reprojection_batch(state, pos, pix, inf, ids, camera, t_cb)
                hk = np.zeros((15, 15))
                gk = np.zeros(15)
                cost += _accumulate_reprojection(hk, gk, batch, 0)
                add_block(k, k, hk)
                g[15 * k : 15 * k + 15] += gk

        for k in range(n):
            s_i = anchor if k == 0 else states[k - 1]
            fac = imu_residual(s_i, states[k], pres[k], gravity, noise)
            for res, j_i, j_j, info, delta in (
                (fac.residual, fac.j_i, fac.j_j, fac.info, HUBER_DELTA_IMU),
                (fac.residual_bias, fac.jb_i, fac.jb_j, fac.info_bias, HUBER_DELTA_BIAS),
            ):
                chi2 = float(res @ info @ res)
                w = huber_weight(np.sqrt(max(chi2, 0.0)), delta)
                wi = w * info
                cost += huber_cost(chi2, delta)
                if k > 0:
                    add_block(k - 1, k - 1, j_i.T @ wi @ j_i)
                    add_block(k - 1, k, j_i.T @ wi @ j_j)
                    add_block(k, k - 1, j_j.T @ wi @ j_i)
                    g[15 * (k - 1) : 15 * k] += j_i.T @ wi @ res
                add_block(k, k, j_j.T @ wi @ j_j)
                g[15 * k : 15 * k + 15] += j_j.T @ wi @ res

        h = scipy.sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(15 * n, 15 * n),
        ).tocsc()
        return h, g, cost

    def sparse_solve(h, g):
        d = np.sqrt(np.clip(h.diagonal(), 1e-300, None))
        scale = scipy.sparse.diags(1.0 / d)
        hs = (scale @ h @ scale).tocsc()
        lu = scipy.sparse.linalg.splu(hs)
        step = lu.solve(-g / d) / d
        resid = h @ step + g
        step += lu.solve(-resid / d) / d
        return step

    states = list(frames)
    h, g, cost = assemble(states)
    for _ in range(max_iters):
        step = sparse_solve(h, g)
        if not np.all(np.isfinite(step)):
            raise NumericalFailureError("batch normal equations are singular")
        alpha = 1.0
        improved = False
        for _ in range(8):
            cand = [retract(s, alpha * step[15 * k : 15 * k + 15]) for k, s in enumerate(states)]
            h_try, g_try, cost_try = assemble(cand)
            if cost_try <= cost * (1.0 + 1e-12) + 1e-15:
                states, h, g, cost = cand, h_try, g_try, cost_try
                improved = True
                break
            alpha *= 0.5
        if not improved:
            break
        if np.linalg.norm(alpha * step) < tol:
            break
    return states
