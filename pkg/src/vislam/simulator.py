"""Deterministic ground-truth generator for synthetic sensor streams.

Produces smooth MAV-like trajectories, inverse-kinematics IMU streams with
injected biases and noise, landmark fields with pinhole observations,
monocular-scaled visual keyframe poses, and loop-closure oracle edges.
All randomness flows from one seeded generator, so identical configs give
bit-identical outputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import InvalidModelError
from .estimator.factors import PinholeCamera
from .manifold import RigidPose
from .preintegration import ImuBias, ImuMeasurement, ImuNoiseModel, euroc_noise_model


@dataclass
class TrajectoryModel:
    """Analytic trajectory: position profile plus attitude profile.

    Kinds: hover, line, circle, lissajous, waypoint_spline. Attitude is
    either a fixed roll/pitch/yaw or yaw-follow (heading along velocity),
    optionally with sinusoidal roll/pitch/yaw wobble on top.
    """

    kind: str = "circle"
    duration: float = 20.0
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    start: np.ndarray = field(default_factory=lambda: np.zeros(3))
    velocity: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.0, 0.0]))
    radius: float = 2.0
    angular_rate: float = 0.5
    phase: float = 0.0
    z_amplitude: float = 0.0
    z_rate: float = 0.0
    amplitudes: np.ndarray = field(default_factory=lambda: np.array([2.0, 1.5, 0.5]))
    rates: np.ndarray = field(default_factory=lambda: np.array([0.9, 1.3, 1.7]))
    phases: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.1, 2.3]))
    waypoints: np.ndarray | None = None
    waypoint_times: np.ndarray | None = None
    attitude: str = "fixed"
    fixed_rpy: np.ndarray = field(default_factory=lambda: np.zeros(3))
    wobble_amplitude: np.ndarray = field(default_factory=lambda: np.zeros(3))
    wobble_rate: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0, 1.0]))
    wobble_phase: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def positions(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Position and velocity at times t, both (n, 3)."""
        t = np.asarray(t, dtype=float)
        n = t.shape[0]
        if self.kind == "hover":
            p = np.tile(self.start, (n, 1))
            v = np.zeros((n, 3))
        elif self.kind == "line":
            v = np.tile(self.velocity, (n, 1))
            p = self.start + np.outer(t, self.velocity)
        elif self.kind == "circle":
            w = self.angular_rate
            ang = w * t + self.phase
            p = np.stack(
                [
                    self.center[0] + self.radius * np.cos(ang),
                    self.center[1] + self.radius * np.sin(ang),
                    self.center[2] + self.z_amplitude * np.sin(self.z_rate * t),
                ],
                axis=1,
            )
            v = np.stack(
                [
                    -self.radius * w * np.sin(ang),
                    self.radius * w * np.cos(ang),
                    self.z_amplitude * self.z_rate * np.cos(self.z_rate * t),
                ],
                axis=1,
            )
        elif self.kind == "lissajous":
            arg = np.outer(t, self.rates) + self.phases
            p = self.center + self.amplitudes * np.sin(arg)
            v = self.amplitudes * self.rates * np.cos(arg)
        elif self.kind == "waypoint_spline":
            if self.waypoints is None or self.waypoint_times is None:
                raise InvalidModelError("waypoint_spline needs waypoints and times")
            spline = CubicSpline(self.waypoint_times, self.waypoints, bc_type="clamped")
            p = spline(t)
            v = spline.derivative()(t)
        else:
            raise InvalidModelError(f"unknown trajectory kind {self.kind!r}")
        return p, v

    def rotations(self, t: np.ndarray, vel: np.ndarray) -> np.ndarray:
        """Body-to-world rotations at times t, (n, 3, 3)."""
        t = np.asarray(t, dtype=float)
        rpy = np.tile(self.fixed_rpy, (t.shape[0], 1)).astype(float)
        if self.attitude == "yaw_follow":
            speed_sq = vel[:, 0] ** 2 + vel[:, 1] ** 2
            if np.any(speed_sq < 1e-10):
                raise InvalidModelError("yaw-follow attitude needs nonzero planar speed")
            rpy[:, 2] = np.arctan2(vel[:, 1], vel[:, 0])
        elif self.attitude != "fixed":
            raise InvalidModelError(f"unknown attitude profile {self.attitude!r}")
        if np.any(self.wobble_amplitude != 0.0):
            rpy = rpy + self.wobble_amplitude * np.sin(
                np.outer(t, self.wobble_rate) + self.wobble_phase
            )
        return _rotations_from_rpy(rpy)


def _rotations_from_rpy(rpy: np.ndarray) -> np.ndarray:
    """Rz(yaw) Ry(pitch) Rx(roll) for a stack of angle triplets."""
    roll, pitch, yaw = rpy[:, 0], rpy[:, 1], rpy[:, 2]
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    r = np.empty((rpy.shape[0], 3, 3))
    r[:, 0, 0] = cy * cp
    r[:, 0, 1] = cy * sp * sr - sy * cr
    r[:, 0, 2] = cy * sp * cr + sy * sr
    r[:, 1, 0] = sy * cp
    r[:, 1, 1] = sy * sp * sr + cy * cr
    r[:, 1, 2] = sy * sp * cr - cy * sr
    r[:, 2, 0] = -sp
    r[:, 2, 1] = cp * sr
    r[:, 2, 2] = cp * cr
    return r


def default_camera() -> PinholeCamera:
    return PinholeCamera(fu=458.654, fv=457.296, cu=367.215, cv=248.375,
                         width=752.0, height=480.0)


def default_t_cb() -> RigidPose:
    """Camera looking along body +x; camera x right, y down."""
    r_cb = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    return RigidPose(r_cb, np.array([0.015, -0.02, 0.01]))


@dataclass
class SimConfig:
    imu_rate: float = 200.0
    cam_rate: float = 20.0
    noise: ImuNoiseModel = field(default_factory=euroc_noise_model)
    imu_noise_scale: float = 1.0  # 0 disables additive IMU noise
    bias: ImuBias = field(default_factory=ImuBias)
    bias_walk: bool = False
    landmark_count: int = 300
    landmark_inner_margin: float = 0.5
    landmark_outer_margin: float = 5.0
    pixel_noise: float = 1.0
    visual_noise: float = 0.0  # keyframe visual position jitter, monocular units
    scale_true: float = 1.0  # monocular units per meter is 1/scale_true
    seed: int = 0
    kf_stride: int = 1
    camera: PinholeCamera = field(default_factory=default_camera)
    t_cb: RigidPose = field(default_factory=default_t_cb)
    min_depth: float = 0.3
    max_depth: float = 30.0
    loop_min_time_gap: float = 8.0
    loop_position_threshold: float = 0.5
    loop_angle_threshold: float = 0.7  # rad
    loop_min_shared: int = 15
    loop_spacing: float = 2.0

    def __post_init__(self):
        ratio = self.imu_rate / self.cam_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise InvalidModelError("imu_rate must be an integer multiple of cam_rate")
        if self.scale_true <= 0:
            raise InvalidModelError("scale_true must be positive")


@dataclass
class GroundTruth:
    """Dense true states at IMU sample times plus scene constants."""

    times: np.ndarray  # (n+1,)
    rotations: np.ndarray  # (n+1, 3, 3)
    positions: np.ndarray  # (n+1, 3)
    velocities: np.ndarray  # (n+1, 3)
    gyro_bias: np.ndarray  # (n, 3), at measurement times
    accel_bias: np.ndarray  # (n, 3)
    gravity: np.ndarray  # (3,)
    landmarks: np.ndarray  # (m, 3)

    def state_at(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        i = int(np.argmin(np.abs(self.times - t)))
        return self.rotations[i], self.positions[i], self.velocities[i]


@dataclass
class FrameObservations:
    timestamp: float
    landmark_ids: np.ndarray  # (k,)
    pixels: np.ndarray  # (k, 2)


@dataclass
class LoopOracleEdge:
    """Revisit announcement with exact 3D-3D matched points.

    Point sets hold the true landmark positions expressed in each
    keyframe's true body frame, standing in for a validated place
    recognition match (descriptor matching is out of scope)."""

    timestamp_a: float
    timestamp_b: float
    landmark_ids: np.ndarray
    points_a: np.ndarray  # (k, 3) in keyframe a body frame
    points_b: np.ndarray  # (k, 3) in keyframe b body frame


@dataclass
class SimulationData:
    ground_truth: GroundTruth
    imu_times: np.ndarray  # (n,)
    imu_omega: np.ndarray  # (n, 3) measured
    imu_accel: np.ndarray  # (n, 3) measured
    imu_dt: float
    frames: list[FrameObservations]
    keyframe_frame_indices: np.ndarray
    keyframe_rotations_wc: np.ndarray  # (k, 3, 3) visual (true camera attitude)
    keyframe_positions_vis: np.ndarray  # (k, 3) camera positions / scale_true
    loop_edges: list[LoopOracleEdge]
    camera: PinholeCamera
    t_cb: RigidPose
    scale_true: float
    config: SimConfig
    model: TrajectoryModel

    @property
    def keyframe_times(self) -> np.ndarray:
        return np.array([self.frames[i].timestamp for i in self.keyframe_frame_indices])

    def imu_measurements(self) -> list[ImuMeasurement]:
        return [
            ImuMeasurement(float(t), w, a)
            for t, w, a in zip(self.imu_times, self.imu_omega, self.imu_accel)
        ]

    def imu_segment(self, t0: float, t1: float) -> tuple[list[ImuMeasurement], np.ndarray]:
        """Samples whose hold interval lies in [t0, t1), with their dts."""
        eps = 0.25 * self.imu_dt
        mask = (self.imu_times >= t0 - eps) & (self.imu_times < t1 - eps)
        ms = [
            ImuMeasurement(float(t), w, a)
            for t, w, a in zip(self.imu_times[mask], self.imu_omega[mask], self.imu_accel[mask])
        ]
        return ms, np.full(len(ms), self.imu_dt)


def _relative_log_small(r_rel: np.ndarray) -> np.ndarray:
    """Vectorized SO(3) log for stacks of small-to-moderate rotations."""
    trace = np.einsum("nii->n", r_rel)
    cos_angle = np.clip((trace - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(cos_angle)
    w = np.stack(
        [
            r_rel[:, 2, 1] - r_rel[:, 1, 2],
            r_rel[:, 0, 2] - r_rel[:, 2, 0],
            r_rel[:, 1, 0] - r_rel[:, 0, 1],
        ],
        axis=1,
    )
    factor = np.where(angle < 1e-7, 0.5 * (1.0 + angle**2 / 6.0), 0.5 * angle / np.maximum(np.sin(angle), 1e-300))
    return factor[:, None] * w


def generate(model: TrajectoryModel, cfg: SimConfig) -> SimulationData:
    """Generate ground truth, sensor streams, observations and loop edges.

    IMU samples are synthesized from exact state increments (discrete
    inverse kinematics), so that zero-order-hold re-integration of the
    noise-free stream reproduces the true states to trapezoid accuracy.
    """
    rng = np.random.default_rng(cfg.seed)
    g_w = np.array([0.0, 0.0, -cfg.noise.gravity_magnitude])
    dt = 1.0 / cfg.imu_rate
    n_imu = int(round(cfg.imu_rate * model.duration))
    state_times = np.arange(n_imu + 1) * dt

    positions_analytic, velocities = model.positions(state_times)
    rotations = model.rotations(state_times, velocities)
    # anchor positions to the trapezoidal rollout of the analytic velocities
    # so the noise-free stream is exactly consistent with the discrete
    # kinematic model (deviation from the closed form is < 2e-5 m per 60 s)
    positions = np.empty_like(positions_analytic)
    positions[0] = positions_analytic[0]
    positions[1:] = positions_analytic[0] + np.cumsum(
        0.5 * (velocities[:-1] + velocities[1:]) * dt, axis=0
    )

    # exact discrete inverse of the ZOH kinematic recursion
    r_rel = np.einsum("nji,njk->nik", rotations[:-1], rotations[1:])
    gyro_true = _relative_log_small(r_rel) / dt
    dv = (velocities[1:] - velocities[:-1]) / dt - g_w
    accel_true = np.einsum("nji,nj->ni", rotations[:-1], dv)

    specific_force = np.linalg.norm(accel_true, axis=1)
    bound = 4.0 * cfg.noise.gravity_magnitude
    if specific_force.max(initial=0.0) >= bound:
        raise InvalidModelError(
            f"specific force {specific_force.max():.2f} m/s^2 exceeds bound {bound:.2f}"
        )

    if cfg.bias_walk:
        gyro_bias = cfg.bias.gyro + cfg.noise.gyro_walk * np.sqrt(dt) * np.cumsum(
            rng.standard_normal((n_imu, 3)), axis=0
        )
        accel_bias = cfg.bias.accel + cfg.noise.accel_walk * np.sqrt(dt) * np.cumsum(
            rng.standard_normal((n_imu, 3)), axis=0
        )
    else:
        gyro_bias = np.tile(cfg.bias.gyro, (n_imu, 1)).astype(float)
        accel_bias = np.tile(cfg.bias.accel, (n_imu, 1)).astype(float)

    sigma_g = cfg.imu_noise_scale * cfg.noise.gyro_noise_density / np.sqrt(dt)
    sigma_a = cfg.imu_noise_scale * cfg.noise.accel_noise_density / np.sqrt(dt)
    imu_omega = gyro_true + gyro_bias + sigma_g * rng.standard_normal((n_imu, 3))
    imu_accel = accel_true + accel_bias + sigma_a * rng.standard_normal((n_imu, 3))

    landmarks = _sample_landmarks(rng, positions, cfg)

    # camera frames on the IMU grid
    stride = int(round(cfg.imu_rate / cfg.cam_rate))
    frame_state_idx = np.arange(0, n_imu, stride)
    r_cb, p_cb = cfg.t_cb.rotation, cfg.t_cb.translation
    frames: list[FrameObservations] = []
    for idx in frame_state_idx:
        r_wb = rotations[idx]
        p_wb = positions[idx]
        r_wc = r_wb @ r_cb.T
        p_wc = p_wb - r_wc @ p_cb
        in_cam = (landmarks - p_wc) @ r_wc
        z = in_cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cfg.camera.fu * in_cam[:, 0] / z + cfg.camera.cu
            v = cfg.camera.fv * in_cam[:, 1] / z + cfg.camera.cv
        visible = (
            (z > cfg.min_depth)
            & (z < cfg.max_depth)
            & (u >= 0.0)
            & (u <= cfg.camera.width)
            & (v >= 0.0)
            & (v <= cfg.camera.height)
        )
        ids = np.nonzero(visible)[0]
        pixels = np.stack([u[ids], v[ids]], axis=1)
        if cfg.pixel_noise > 0.0:
            pixels = pixels + cfg.pixel_noise * rng.standard_normal(pixels.shape)
        frames.append(FrameObservations(float(state_times[idx]), ids, pixels))

    kf_indices = np.arange(0, len(frames), cfg.kf_stride)
    kf_state_idx = frame_state_idx[kf_indices]
    kf_r_wb = rotations[kf_state_idx]
    kf_p_wb = positions[kf_state_idx]
    kf_r_wc = np.einsum("nij,kj->nik", kf_r_wb, r_cb)
    kf_p_wc = kf_p_wb - np.einsum("nij,j->ni", kf_r_wc, p_cb)
    kf_p_vis = kf_p_wc / cfg.scale_true
    if cfg.visual_noise > 0.0:
        kf_p_vis = kf_p_vis + cfg.visual_noise * rng.standard_normal(kf_p_vis.shape)

    loop_edges = _loop_oracle(frames, kf_indices, kf_r_wb, kf_p_wb, landmarks, cfg)

    truth = GroundTruth(
        times=state_times,
        rotations=rotations,
        positions=positions,
        velocities=velocities,
        gyro_bias=gyro_bias,
        accel_bias=accel_bias,
        gravity=g_w,
        landmarks=landmarks,
    )
    return SimulationData(
        ground_truth=truth,
        imu_times=state_times[:-1].copy(),
        imu_omega=imu_omega,
        imu_accel=imu_accel,
        imu_dt=dt,
        frames=frames,
        keyframe_frame_indices=kf_indices,
        keyframe_rotations_wc=kf_r_wc,
        keyframe_positions_vis=kf_p_vis,
        loop_edges=loop_edges,
        camera=cfg.camera,
        t_cb=cfg.t_cb,
        scale_true=cfg.scale_true,
        config=cfg,
        model=model,
    )


def _sample_landmarks(rng: np.random.Generator, positions: np.ndarray, cfg: SimConfig) -> np.ndarray:
    """Uniform points in a box shell around the trajectory bounding box."""
    lo = positions.min(axis=0)
    hi = positions.max(axis=0)
    inner_lo = lo - cfg.landmark_inner_margin
    inner_hi = hi + cfg.landmark_inner_margin
    outer_lo = lo - cfg.landmark_outer_margin
    outer_hi = hi + cfg.landmark_outer_margin
    out: list[np.ndarray] = []
    while len(out) < cfg.landmark_count:
        cand = rng.uniform(outer_lo, outer_hi, size=(4 * cfg.landmark_count, 3))
        inside = np.all((cand > inner_lo) & (cand < inner_hi), axis=1)
        for c in cand[~inside]:
            out.append(c)
            if len(out) == cfg.landmark_count:
                break
    return np.array(out)


def _loop_oracle(
    frames: list[FrameObservations],
    kf_indices: np.ndarray,
    kf_r_wb: np.ndarray,
    kf_p_wb: np.ndarray,
    landmarks: np.ndarray,
    cfg: SimConfig,
) -> list[LoopOracleEdge]:
    """Matched-point revisit edges between spatially close, time-distant keyframes."""
    edges: list[LoopOracleEdge] = []
    times = np.array([frames[i].timestamp for i in kf_indices])
    last_emitted = -np.inf
    for b in range(len(kf_indices)):
        if times[b] - last_emitted < cfg.loop_spacing:
            continue
        candidates = np.nonzero(times < times[b] - cfg.loop_min_time_gap)[0]
        if candidates.size == 0:
            continue
        dists = np.linalg.norm(kf_p_wb[candidates] - kf_p_wb[b], axis=1)
        order = np.argsort(dists)
        for a in candidates[order]:
            if dists[np.nonzero(candidates == a)[0][0]] > cfg.loop_position_threshold:
                break
            r_rel = kf_r_wb[a].T @ kf_r_wb[b]
            angle = np.arccos(np.clip((np.trace(r_rel) - 1.0) * 0.5, -1.0, 1.0))
            if angle > cfg.loop_angle_threshold:
                continue
            ids_a = frames[kf_indices[a]].landmark_ids
            ids_b = frames[kf_indices[b]].landmark_ids
            shared = np.intersect1d(ids_a, ids_b)
            if shared.size >= cfg.loop_min_shared:
                pts_w = landmarks[shared]
                pts_a = (pts_w - kf_p_wb[a]) @ kf_r_wb[a]
                pts_b = (pts_w - kf_p_wb[b]) @ kf_r_wb[b]
                edges.append(
                    LoopOracleEdge(float(times[a]), float(times[b]), shared, pts_a, pts_b)
                )
                last_emitted = times[b]
                break
    return edges


def initialization_input(
    data: SimulationData,
    max_keyframes: int | None = None,
    t_max: float | None = None,
    bias_lin: ImuBias | None = None,
):
    """Assemble the initializer input from simulated keyframes: visual poses
    plus zero-bias preintegrations over each consecutive keyframe gap."""
    from .initializer import InitializationInput, KeyframeVisualPose
    from .preintegration import preintegrate

    times = data.keyframe_times
    count = len(times)
    if t_max is not None:
        count = int(np.searchsorted(times, t_max, side="right"))
    if max_keyframes is not None:
        count = min(count, max_keyframes)
    kfs = [
        KeyframeVisualPose(
            id=k,
            timestamp=float(times[k]),
            r_wc=data.keyframe_rotations_wc[k],
            p_wc=data.keyframe_positions_vis[k],
        )
        for k in range(count)
    ]
    pres = []
    for k in range(count - 1):
        ms, dts = data.imu_segment(times[k], times[k + 1])
        pres.append(preintegrate(ms, dts, data.config.noise, bias_lin=bias_lin))
    return InitializationInput(kfs, pres, data.t_cb, data.config.noise.gravity_magnitude)


def replay(data: SimulationData):
    """Yield ('imu', measurement) and ('camera', frame) events merged by
    timestamp, deterministic order, ties broken IMU-first."""
    i, j = 0, 0
    n_imu = data.imu_times.shape[0]
    frames = data.frames
    while i < n_imu or j < len(frames):
        t_imu = data.imu_times[i] if i < n_imu else np.inf
        t_cam = frames[j].timestamp if j < len(frames) else np.inf
        if t_imu <= t_cam:
            yield "imu", ImuMeasurement(float(t_imu), data.imu_omega[i], data.imu_accel[i])
            i += 1
        else:
            yield "camera", frames[j]
            j += 1
