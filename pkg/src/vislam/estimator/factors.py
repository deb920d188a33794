"""Residual factors for the nonlinear least-squares back end.

Each factor returns its residual together with analytic Jacobians in the
error-state convention [dtheta, dv, dp, dbg, dba] with right-multiplicative
rotation perturbations (R <- R Exp(dtheta)); positions, velocities and
biases perturb additively in the world frame.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np

from ..errors import BehindCameraError
from ..manifold import RigidPose, exp_so3, hat, log_so3, right_jacobian_inv_so3, right_jacobian_so3
from ..preintegration import ImuNoiseModel, NavState, PreintegratedImu

# chi-square 95% quantiles used as Huber thresholds (on the whitened norm)
HUBER_DELTA_REPROJ = np.sqrt(5.991)  # 2 dof
HUBER_DELTA_IMU = np.sqrt(16.919)  # 9 dof
HUBER_DELTA_BIAS = np.sqrt(12.592)  # 6 dof
HUBER_DELTA_PRIOR = np.sqrt(24.996)  # 15 dof


@dataclass(frozen=True)
class PinholeCamera:
    """Undistorted pinhole intrinsics with pixel image bounds."""

    fu: float
    fv: float
    cu: float
    cv: float
    width: float = 752.0
    height: float = 480.0

    def __post_init__(self):
        if self.fu <= 0 or self.fv <= 0:
            raise ValueError("focal lengths must be positive")


@dataclass
class Landmark:
    id: int
    position: np.ndarray  # world frame, meters


@dataclass
class Observation:
    """One keypoint match: landmark id, pixel location, 2x2 information."""

    landmark_id: int
    pixel: np.ndarray
    info: np.ndarray = field(default_factory=lambda: np.eye(2))


def project(camera: PinholeCamera, point_c: np.ndarray) -> np.ndarray:
    """Pinhole projection of a camera-frame point with positive depth."""
    x, y, z = point_c
    if z <= 1e-6:
        raise BehindCameraError(f"point depth {z:.3e} is not positive")
    return np.array([camera.fu * x / z + camera.cu, camera.fv * y / z + camera.cv])


def projection_jacobian(camera: PinholeCamera, point_c: np.ndarray) -> np.ndarray:
    """d(pixel)/d(point in camera frame), 2x3."""
    x, y, z = point_c
    return np.array(
        [
            [camera.fu / z, 0.0, -camera.fu * x / z**2],
            [0.0, camera.fv / z, -camera.fv * y / z**2],
        ]
    )


def huber_weight(whitened_norm: float, delta: float) -> float:
    """IRLS weight of the Huber kernel at a given whitened residual norm."""
    if whitened_norm <= delta:
        return 1.0
    return delta / whitened_norm


def huber_cost(chi2: float, delta: float) -> float:
    """Robust cost value for a squared whitened residual."""
    u = np.sqrt(max(chi2, 0.0))
    if u <= delta:
        return chi2
    return 2.0 * delta * u - delta * delta


@dataclass
class ReprojectionFactor:
    """Residual pixel - project(X_C) with X_C = R_CB R_BW (X_W - p_WB) + p_CB."""

    residual: np.ndarray  # 2
    j_theta: np.ndarray  # 2x3, wrt body rotation
    j_pos: np.ndarray  # 2x3, wrt body position
    j_landmark: np.ndarray  # 2x3
    info: np.ndarray  # 2x2
    weight: float  # Huber IRLS weight
    chi2: float


def reprojection_residual(
    state: NavState,
    landmark: Landmark,
    obs: Observation,
    camera: PinholeCamera,
    t_cb: RigidPose,
) -> ReprojectionFactor:
    """Reprojection factor for one observation; raises BehindCameraError
    when the transformed point has non-positive depth."""
    r_cb, p_cb = t_cb.rotation, t_cb.translation
    q = state.rotation.T @ (landmark.position - state.position)  # body frame
    point_c = r_cb @ q + p_cb
    pixel_hat = project(camera, point_c)
    residual = obs.pixel - pixel_hat

    dpi = projection_jacobian(camera, point_c)
    dxc_dtheta = r_cb @ hat(q)
    dxc_dpos = -r_cb @ state.rotation.T
    j_theta = -dpi @ dxc_dtheta
    j_pos = -dpi @ dxc_dpos
    j_landmark = -dpi @ (r_cb @ state.rotation.T)

    chi2 = float(residual @ obs.info @ residual)
    weight = huber_weight(np.sqrt(chi2), HUBER_DELTA_REPROJ)
    return ReprojectionFactor(residual, j_theta, j_pos, j_landmark, obs.info, weight, chi2)


@dataclass
class ImuFactor:
    """Preintegration residual [e_R, e_v, e_p] plus bias-change residual e_b."""

    residual: np.ndarray  # 9
    residual_bias: np.ndarray  # 6
    j_i: np.ndarray  # 9x15 wrt state i
    j_j: np.ndarray  # 9x15 wrt state j
    jb_i: np.ndarray  # 6x15
    jb_j: np.ndarray  # 6x15
    info: np.ndarray  # 9x9, from the preintegration covariance
    info_bias: np.ndarray  # 6x6, from the walk covariance over the span
    chi2: float
    chi2_bias: float


_PRE_INFO_CACHE: "weakref.WeakKeyDictionary[PreintegratedImu, np.ndarray]" = weakref.WeakKeyDictionary()


def _preintegration_info(pre: PreintegratedImu) -> np.ndarray:
    """Inverse preintegration covariance, cached per immutable snapshot."""
    info = _PRE_INFO_CACHE.get(pre)
    if info is None:
        info = np.linalg.inv(pre.covariance)
        info = 0.5 * (info + info.T)
        _PRE_INFO_CACHE[pre] = info
    return info


def random_walk_information(noise: ImuNoiseModel, dt_total: float) -> np.ndarray:
    """Inverse covariance of the bias change over a span of dt_total."""
    cov = np.concatenate(
        [
            np.full(3, noise.gyro_walk**2 * dt_total),
            np.full(3, noise.accel_walk**2 * dt_total),
        ]
    )
    return np.diag(1.0 / cov)


def imu_residual(
    state_i: NavState,
    state_j: NavState,
    pre: PreintegratedImu,
    gravity: np.ndarray,
    noise: ImuNoiseModel,
) -> ImuFactor:
    """Preintegration factor between two states spanning pre.dt_total.

    The increments are corrected to first order at state j's bias; the
    9-dof residual is weighted by the inverse preintegration covariance
    and the bias residual by the inverse random-walk covariance.
    """
    g = np.asarray(gravity, dtype=float)
    dt = pre.dt_total
    r_i = state_i.rotation
    r_j = state_j.rotation
    dbg = state_j.bias.gyro - pre.bias_lin.gyro
    dba = state_j.bias.accel - pre.bias_lin.accel

    corr = pre.dr_dbg @ dbg
    delta_r = pre.delta_r @ exp_so3(corr)
    delta_v = pre.delta_v + pre.dv_dbg @ dbg + pre.dv_dba @ dba
    delta_p = pre.delta_p + pre.dp_dbg @ dbg + pre.dp_dba @ dba

    e_r = log_so3(delta_r.T @ r_i.T @ r_j)
    w_v = r_i.T @ (state_j.velocity - state_i.velocity - g * dt)
    w_p = r_i.T @ (
        state_j.position - state_i.position - state_i.velocity * dt - 0.5 * g * dt * dt
    )
    e_v = w_v - delta_v
    e_p = w_p - delta_p
    e_b = state_j.bias.as_vector() - state_i.bias.as_vector()

    jr_inv = right_jacobian_inv_so3(e_r)
    exp_neg_er = exp_so3(-e_r)

    j_i = np.zeros((9, 15))
    j_j = np.zeros((9, 15))
    # rotation rows
    j_i[0:3, 0:3] = -jr_inv @ r_j.T @ r_i
    j_j[0:3, 0:3] = jr_inv
    j_j[0:3, 9:12] = -jr_inv @ exp_neg_er @ right_jacobian_so3(corr) @ pre.dr_dbg
    # velocity rows
    j_i[3:6, 0:3] = hat(w_v)
    j_i[3:6, 3:6] = -r_i.T
    j_j[3:6, 3:6] = r_i.T
    j_j[3:6, 9:12] = -pre.dv_dbg
    j_j[3:6, 12:15] = -pre.dv_dba
    # position rows
    j_i[6:9, 0:3] = hat(w_p)
    j_i[6:9, 3:6] = -r_i.T * dt
    j_i[6:9, 6:9] = -r_i.T
    j_j[6:9, 6:9] = r_i.T
    j_j[6:9, 9:12] = -pre.dp_dbg
    j_j[6:9, 12:15] = -pre.dp_dba

    jb_i = np.zeros((6, 15))
    jb_j = np.zeros((6, 15))
    jb_i[:, 9:15] = -np.eye(6)
    jb_j[:, 9:15] = np.eye(6)

    info = _preintegration_info(pre)
    info_bias = random_walk_information(noise, dt)

    residual = np.concatenate([e_r, e_v, e_p])
    chi2 = float(residual @ info @ residual)
    chi2_bias = float(e_b @ info_bias @ e_b)
    return ImuFactor(residual, e_b, j_i, j_j, jb_i, jb_j, info, info_bias, chi2, chi2_bias)


@dataclass
class PriorFactor:
    residual: np.ndarray  # 15
    jacobian: np.ndarray  # 15x15
    info: np.ndarray
    chi2: float


def prior_residual(state: NavState, mean: NavState, info: np.ndarray) -> PriorFactor:
    """Residual of a state against a Gaussian prior in error-state order."""
    e_r = log_so3(mean.rotation.T @ state.rotation)
    e_v = mean.velocity - state.velocity
    e_p = mean.position - state.position
    e_b = mean.bias.as_vector() - state.bias.as_vector()
    residual = np.concatenate([e_r, e_v, e_p, e_b])

    jac = np.zeros((15, 15))
    jac[0:3, 0:3] = right_jacobian_inv_so3(e_r)
    jac[3:15, 3:15] = -np.eye(12)
    chi2 = float(residual @ info @ residual)
    return PriorFactor(residual, jac, info, chi2)


def hat_batch(v: np.ndarray) -> np.ndarray:
    """Skew matrices for a stack of vectors, (n, 3) -> (n, 3, 3)."""
    n = v.shape[0]
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


@dataclass
class ReprojectionBatch:
    """Vectorized reprojection terms for all observations of one frame.

    Invalid rows (non-positive depth) are dropped; ``n_dropped`` counts them.
    """

    residuals: np.ndarray  # (n, 2)
    j_theta: np.ndarray  # (n, 2, 3)
    j_pos: np.ndarray  # (n, 2, 3)
    j_landmark: np.ndarray  # (n, 2, 3)
    info: np.ndarray  # (n, 2, 2)
    weights: np.ndarray  # (n,)
    chi2: np.ndarray  # (n,)
    landmark_ids: np.ndarray  # (n,)
    n_dropped: int

    @property
    def robust_cost(self) -> float:
        u = np.sqrt(np.maximum(self.chi2, 0.0))
        d = HUBER_DELTA_REPROJ
        return float(np.where(u <= d, self.chi2, 2.0 * d * u - d * d).sum())

    def weighted_info(self) -> np.ndarray:
        return self.weights[:, None, None] * self.info

    def pose_jacobian(self) -> np.ndarray:
        """(n, 2, 6) concatenation [j_theta | j_pos]."""
        return np.concatenate([self.j_theta, self.j_pos], axis=2)


def reprojection_batch(
    state: NavState,
    lm_positions: np.ndarray,
    pixels: np.ndarray,
    infos: np.ndarray,
    landmark_ids: np.ndarray,
    camera: PinholeCamera,
    t_cb: RigidPose,
) -> ReprojectionBatch:
    """All reprojection residuals/Jacobians of one frame in one sweep."""
    r_wb = state.rotation
    r_cb, p_cb = t_cb.rotation, t_cb.translation
    q = (lm_positions - state.position) @ r_wb  # rows are R_BW (X - p)
    xc = q @ r_cb.T + p_cb
    valid = xc[:, 2] > 1e-6
    n_dropped = int(np.count_nonzero(~valid))
    q, xc = q[valid], xc[valid]
    pixels = pixels[valid]
    infos = infos[valid]
    landmark_ids = np.asarray(landmark_ids)[valid]

    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]
    proj = np.stack([camera.fu * x / z + camera.cu, camera.fv * y / z + camera.cv], axis=1)
    residuals = pixels - proj

    n = xc.shape[0]
    dpi = np.zeros((n, 2, 3))
    dpi[:, 0, 0] = camera.fu / z
    dpi[:, 0, 2] = -camera.fu * x / z**2
    dpi[:, 1, 1] = camera.fv / z
    dpi[:, 1, 2] = -camera.fv * y / z**2

    dxc_dtheta = np.einsum("ab,nbc->nac", r_cb, hat_batch(q))
    rot_cw = r_cb @ r_wb.T
    j_theta = -np.einsum("nij,njk->nik", dpi, dxc_dtheta)
    j_pos = np.einsum("nij,jk->nik", dpi, rot_cw)  # -dpi @ (-rot_cw)
    j_landmark = -np.einsum("nij,jk->nik", dpi, rot_cw)

    chi2 = np.einsum("ni,nij,nj->n", residuals, infos, residuals)
    norms = np.sqrt(np.maximum(chi2, 0.0))
    weights = np.where(norms <= HUBER_DELTA_REPROJ, 1.0, HUBER_DELTA_REPROJ / np.maximum(norms, 1e-300))
    return ReprojectionBatch(
        residuals, j_theta, j_pos, j_landmark, infos, weights, chi2, landmark_ids, n_dropped
    )


def retract(state: NavState, delta: np.ndarray) -> NavState:
    """Apply an error-state increment [dtheta, dv, dp, dbg, dba]."""
    from ..preintegration import ImuBias

    return NavState(
        rotation=state.rotation @ exp_so3(delta[0:3]),
        position=state.position + delta[6:9],
        velocity=state.velocity + delta[3:6],
        bias=ImuBias(state.bias.gyro + delta[9:12], state.bias.accel + delta[12:15]),
        timestamp=state.timestamp,
    )
