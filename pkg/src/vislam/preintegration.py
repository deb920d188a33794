"""IMU measurement compounding between keyframes.

Accumulates gyro/accel samples into relative rotation, velocity and
position increments together with first-order bias Jacobians and a 9x9
covariance in [dtheta, dv, dp] error ordering, plus the direct kinematic
predictor that maps a navigation state across one preintegrated span.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .manifold import exp_so3, hat, right_jacobian_so3


@dataclass(frozen=True)
class ImuMeasurement:
    """One IMU sample: body-frame angular rate and specific force."""

    timestamp: float
    omega: np.ndarray  # rad/s
    accel: np.ndarray  # m/s^2, includes gravity reaction


@dataclass(frozen=True)
class ImuBias:
    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.gyro, self.accel])


@dataclass(frozen=True)
class ImuNoiseModel:
    """Continuous-time noise densities plus the local gravity magnitude."""

    gyro_noise_density: float  # rad/s/sqrt(Hz)
    accel_noise_density: float  # m/s^2/sqrt(Hz)
    gyro_walk: float  # rad/s^2/sqrt(Hz)
    accel_walk: float  # m/s^3/sqrt(Hz)
    gravity_magnitude: float = 9.81

    def __post_init__(self):
        vals = (
            self.gyro_noise_density,
            self.accel_noise_density,
            self.gyro_walk,
            self.accel_walk,
            self.gravity_magnitude,
        )
        if any(v <= 0 for v in vals):
            raise ValueError("noise densities and gravity must be strictly positive")


def euroc_noise_model() -> ImuNoiseModel:
    """Noise densities typical of the ADIS16448-class MAV IMU."""
    return ImuNoiseModel(
        gyro_noise_density=1.6968e-4,
        accel_noise_density=2.0e-3,
        gyro_walk=1.9393e-5,
        accel_walk=3.0e-3,
        gravity_magnitude=9.81,
    )


@dataclass(frozen=True)
class NavState:
    """Per-frame estimation target: pose, velocity and IMU biases."""

    rotation: np.ndarray  # R_WB, 3x3
    position: np.ndarray  # m, world
    velocity: np.ndarray  # m/s, world
    bias: ImuBias
    timestamp: float = 0.0


@dataclass(frozen=True, eq=False)
class PreintegratedImu:
    """Compounded increments over one keyframe interval.

    Jacobian fields hold the derivative of each increment with respect to
    a change of the gyro/accel bias away from ``bias_lin``. ``covariance``
    is ordered [dtheta, dv, dp].
    """

    delta_r: np.ndarray = field(default_factory=lambda: np.eye(3))
    delta_v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    delta_p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dr_dbg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    dv_dbg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    dv_dba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    dp_dbg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    dp_dba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((9, 9)))
    dt_total: float = 0.0
    bias_lin: ImuBias = field(default_factory=ImuBias)


def integrate_measurement(
    state: PreintegratedImu,
    m: ImuMeasurement,
    dt: float,
    noise: ImuNoiseModel,
) -> PreintegratedImu:
    """Fold one sample into the running preintegration (zero-order hold).

    Position is updated before velocity before rotation within a step, so
    each update consumes the increments from the start of the step.
    """
    if not (dt > 0.0):
        raise ValueError(f"dt must be positive, got {dt}")
    w = np.asarray(m.omega, dtype=float) - state.bias_lin.gyro
    a = np.asarray(m.accel, dtype=float) - state.bias_lin.accel
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(a))):
        raise ValueError("non-finite IMU measurement")

    dr = state.delta_r
    dtheta = w * dt
    r_incr = exp_so3(dtheta)
    jr = right_jacobian_so3(dtheta)
    a_hat = hat(a)

    delta_p = state.delta_p + state.delta_v * dt + 0.5 * dr @ a * dt * dt
    delta_v = state.delta_v + dr @ a * dt
    delta_r = dr @ r_incr

    # first-order bias sensitivities, chained through the old increments
    dp_dbg = state.dp_dbg + state.dv_dbg * dt - 0.5 * dr @ a_hat @ state.dr_dbg * dt * dt
    dp_dba = state.dp_dba + state.dv_dba * dt - 0.5 * dr * dt * dt
    dv_dbg = state.dv_dbg - dr @ a_hat @ state.dr_dbg * dt
    dv_dba = state.dv_dba - dr * dt
    dr_dbg = r_incr.T @ state.dr_dbg - jr * dt

    # discrete error-state propagation; white-noise covariance density^2/dt
    a_mat = np.eye(9)
    a_mat[0:3, 0:3] = r_incr.T
    a_mat[3:6, 0:3] = -dr @ a_hat * dt
    a_mat[6:9, 0:3] = -0.5 * dr @ a_hat * dt * dt
    a_mat[6:9, 3:6] = np.eye(3) * dt
    b_mat = np.zeros((9, 6))
    b_mat[0:3, 0:3] = jr * dt
    b_mat[3:6, 3:6] = dr * dt
    b_mat[6:9, 3:6] = 0.5 * dr * dt * dt
    q = np.zeros((6, 6))
    q[0:3, 0:3] = (noise.gyro_noise_density**2 / dt) * np.eye(3)
    q[3:6, 3:6] = (noise.accel_noise_density**2 / dt) * np.eye(3)
    covariance = a_mat @ state.covariance @ a_mat.T + b_mat @ q @ b_mat.T

    return replace(
        state,
        delta_r=delta_r,
        delta_v=delta_v,
        delta_p=delta_p,
        dr_dbg=dr_dbg,
        dv_dbg=dv_dbg,
        dv_dba=dv_dba,
        dp_dbg=dp_dbg,
        dp_dba=dp_dba,
        covariance=covariance,
        dt_total=state.dt_total + dt,
    )


def preintegrate(
    measurements: list[ImuMeasurement],
    dts: np.ndarray,
    noise: ImuNoiseModel,
    bias_lin: ImuBias | None = None,
) -> PreintegratedImu:
    """Compound a whole segment; dts[k] is the hold time of sample k."""
    pre = PreintegratedImu(bias_lin=bias_lin or ImuBias())
    for m, dt in zip(measurements, dts):
        pre = integrate_measurement(pre, m, float(dt), noise)
    return pre


def correct_bias_first_order(
    pre: PreintegratedImu, new_bias: ImuBias
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Increments re-expressed at a nearby bias without re-integration."""
    dbg = np.asarray(new_bias.gyro, dtype=float) - pre.bias_lin.gyro
    dba = np.asarray(new_bias.accel, dtype=float) - pre.bias_lin.accel
    delta_r = pre.delta_r @ exp_so3(pre.dr_dbg @ dbg)
    delta_v = pre.delta_v + pre.dv_dbg @ dbg + pre.dv_dba @ dba
    delta_p = pre.delta_p + pre.dp_dbg @ dbg + pre.dp_dba @ dba
    return delta_r, delta_v, delta_p


def predict(state_i: NavState, pre: PreintegratedImu, gravity: np.ndarray) -> NavState:
    """Propagate a navigation state across one preintegrated span.

    Applies the stored first-order bias correction for the difference
    between the state's bias and the preintegration's linearization bias;
    biases are carried over unchanged.
    """
    if not (pre.dt_total > 0.0):
        raise ValueError("preintegration spans no time")
    g = np.asarray(gravity, dtype=float)
    dt = pre.dt_total
    delta_r, delta_v, delta_p = correct_bias_first_order(pre, state_i.bias)
    r_i = state_i.rotation
    rotation = r_i @ delta_r
    velocity = state_i.velocity + g * dt + r_i @ delta_v
    position = state_i.position + state_i.velocity * dt + 0.5 * g * dt * dt + r_i @ delta_p
    return NavState(
        rotation=rotation,
        position=position,
        velocity=velocity,
        bias=state_i.bias,
        timestamp=state_i.timestamp + dt,
    )
