"""Divide-and-conquer inertial initialization from monocular keyframes.

Given up-to-scale visual keyframe poses and the IMU preintegrations between
them, estimates in order: (1) gyroscope bias, (2) scale and gravity,
(3) accelerometer bias with scale and gravity-direction refinement using
the known gravity magnitude, (4) per-keyframe velocities. Also provides the
post-relocalization bias re-estimation on a short run of vision-localized
frames with scale and gravity already known.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateMotionError, InsufficientDataError
from .manifold import (
    RigidPose,
    exp_so3,
    hat,
    log_so3,
    right_jacobian_inv_so3,
    right_jacobian_so3,
)
from .preintegration import ImuBias, PreintegratedImu, correct_bias_first_order

GRAVITY_DOWN = np.array([0.0, 0.0, -1.0])  # gravity direction in the inertial frame
CONDITION_NUMBER_THRESHOLD = 25_000.0  # diagnostic only, never a hard failure


@dataclass(frozen=True)
class KeyframeVisualPose:
    """Camera pose from the monocular front end, position in arbitrary units."""

    id: int
    timestamp: float
    r_wc: np.ndarray  # 3x3
    p_wc: np.ndarray  # 3, monocular units


@dataclass
class InitializationInput:
    keyframes: list[KeyframeVisualPose]
    preintegrations: list[PreintegratedImu]
    t_cb: RigidPose
    gravity_magnitude: float = 9.81

    def __post_init__(self):
        if len(self.preintegrations) != len(self.keyframes) - 1:
            raise ValueError("need exactly one preintegration per consecutive keyframe pair")
        times = [kf.timestamp for kf in self.keyframes]
        if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
            raise ValueError("keyframe timestamps must be strictly increasing")
        for k, pre in enumerate(self.preintegrations):
            gap = times[k + 1] - times[k]
            if abs(pre.dt_total - gap) > 1e-3:
                raise ValueError(
                    f"preintegration {k} spans {pre.dt_total:.6f}s "
                    f"but keyframe gap is {gap:.6f}s"
                )

    def body_rotations(self) -> np.ndarray:
        """R_WB per keyframe from the visual attitude and extrinsics."""
        r_cb = self.t_cb.rotation
        return np.stack([kf.r_wc @ r_cb for kf in self.keyframes])


@dataclass
class InitializationResult:
    scale: float
    gravity_w: np.ndarray
    gyro_bias: np.ndarray
    accel_bias: np.ndarray
    velocities: np.ndarray  # (N, 3)
    condition_number_stage2: float
    condition_number_stage3: float


def _solve_svd(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares solve via thin SVD; returns (x, condition number)."""
    u, sv, vt = np.linalg.svd(a, full_matrices=False)
    if sv[-1] < 1e-12 * sv[0]:
        raise DegenerateMotionError(
            f"system is rank deficient (sigma_min/sigma_max = {sv[-1] / sv[0]:.3e})"
        )
    x = vt.T @ ((u.T @ b) / sv)
    return x, float(sv[0] / sv[-1])


def estimate_gyro_bias(inp: InitializationInput, max_iters: int = 20) -> np.ndarray:
    """Constant gyro bias minimizing the gap between gyro integration and
    the relative visual orientations, by Gauss-Newton from a zero seed."""
    if len(inp.keyframes) < 2:
        raise InsufficientDataError("need at least 2 keyframes")
    r_wb = inp.body_rotations()
    rel = [r_wb[i].T @ r_wb[i + 1] for i in range(len(r_wb) - 1)]

    bias = np.zeros(3)
    for _ in range(max_iters):
        h = np.zeros((3, 3))
        g = np.zeros(3)
        for pre, r_rel in zip(inp.preintegrations, rel):
            db = bias - pre.bias_lin.gyro
            corr = pre.dr_dbg @ db
            res = log_so3(exp_so3(-corr) @ pre.delta_r.T @ r_rel)
            jac = -right_jacobian_inv_so3(res) @ exp_so3(-res) @ right_jacobian_so3(corr) @ pre.dr_dbg
            h += jac.T @ jac
            g += jac.T @ res
        eig = np.linalg.eigvalsh(h)
        if eig[0] < 1e-12 * max(eig[-1], 1e-300):
            raise DegenerateMotionError("gyro-bias normal equations are singular")
        step = np.linalg.solve(h, -g)
        bias = bias + step
        if np.linalg.norm(step) < 1e-10:
            break
    return bias


def _corrected_deltas(
    inp: InitializationInput, gyro_bias: np.ndarray
) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
    """Per-pair (delta_r, delta_v, delta_p) re-expressed at the given gyro bias."""
    rs, vs, ps = [], [], []
    for pre in inp.preintegrations:
        new_bias = ImuBias(gyro_bias, pre.bias_lin.accel)
        dr, dv, dp = correct_bias_first_order(pre, new_bias)
        rs.append(dr)
        vs.append(dv)
        ps.append(dp)
    return rs, vs, ps


def _triplet_geometry(inp: InitializationInput, i: int):
    """Shared per-triplet quantities for keyframes (i, i+1, i+2)."""
    kfs = inp.keyframes
    p_cb = inp.t_cb.translation
    dt12 = kfs[i + 1].timestamp - kfs[i].timestamp
    dt23 = kfs[i + 2].timestamp - kfs[i + 1].timestamp
    p1, p2, p3 = kfs[i].p_wc, kfs[i + 1].p_wc, kfs[i + 2].p_wc
    lam = (p2 - p1) * dt23 - (p3 - p2) * dt12
    cam_term = (kfs[i].r_wc - kfs[i + 1].r_wc) @ p_cb * dt23 - (
        kfs[i + 1].r_wc - kfs[i + 2].r_wc
    ) @ p_cb * dt12
    return dt12, dt23, lam, cam_term


def build_scale_gravity_system(
    inp: InitializationInput, gyro_bias: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked 3(N-2) x 4 system A [s, g_W] = b over keyframe triplets."""
    n = len(inp.keyframes)
    if n < 4:
        raise InsufficientDataError("need at least 4 keyframes")
    if gyro_bias is None:
        gyro_bias = np.zeros(3)
    _, dvs, dps = _corrected_deltas(inp, gyro_bias)
    r_wb = inp.body_rotations()

    a = np.zeros((3 * (n - 2), 4))
    b = np.zeros(3 * (n - 2))
    for i in range(n - 2):
        dt12, dt23, lam, cam_term = _triplet_geometry(inp, i)
        rows = slice(3 * i, 3 * i + 3)
        a[rows, 0] = lam
        a[rows, 1:4] = 0.5 * (dt12**2 * dt23 + dt23**2 * dt12) * np.eye(3)
        b[rows] = (
            cam_term
            + r_wb[i] @ dps[i] * dt23
            - r_wb[i + 1] @ dps[i + 1] * dt12
            - r_wb[i] @ dvs[i] * dt12 * dt23
        )
    return a, b


def solve_scale_gravity(
    inp: InitializationInput, gyro_bias: np.ndarray | None = None
) -> tuple[float, np.ndarray, float]:
    """Scale and gravity from stacked three-keyframe relations, ignoring
    accelerometer bias; solved via SVD. Returns (scale, g_W, condition)."""
    a, b = build_scale_gravity_system(inp, gyro_bias)
    x, cond = _solve_svd(a, b)
    return float(x[0]), x[1:4], cond


def gravity_alignment_rotation(g_approx: np.ndarray) -> np.ndarray:
    """Rotation R_WI mapping the inertial down direction onto g_approx."""
    g_hat = np.asarray(g_approx, dtype=float)
    norm = np.linalg.norm(g_hat)
    if norm <= 0.0:
        raise ValueError("gravity direction must be nonzero")
    g_hat = g_hat / norm
    cross = np.cross(GRAVITY_DOWN, g_hat)
    sin_theta = np.linalg.norm(cross)
    cos_theta = float(GRAVITY_DOWN @ g_hat)
    if sin_theta < 1e-8:
        if cos_theta > 0.0:
            return np.eye(3)
        # estimated gravity points straight up: any horizontal axis works
        return exp_so3(np.array([np.pi, 0.0, 0.0]))
    axis = cross / sin_theta
    theta = np.arctan2(sin_theta, cos_theta)
    return exp_so3(axis * theta)


def refine_with_accel_bias(
    inp: InitializationInput,
    g_approx: np.ndarray,
    gyro_bias: np.ndarray | None = None,
    passes: int = 2,
) -> tuple[float, np.ndarray, np.ndarray, float]:
    """Joint scale, gravity-direction correction and accelerometer bias,
    constraining the gravity magnitude.

    The gravity direction is linearized around g_approx; with ``passes`` > 1
    the solve is repeated with the direction relinearized at the previous
    answer, which removes the quadratic truncation the first pass inherits
    from a bias-polluted g_approx. Extra passes change nothing measurable
    on realistically noisy data.

    Returns (scale, gravity_w, accel_bias, condition number).
    """
    scale, gravity, accel_bias, cond = 1.0, np.asarray(g_approx, dtype=float), np.zeros(3), np.inf
    for _ in range(max(passes, 1)):
        scale, gravity, accel_bias, cond = _refine_single_pass(inp, gravity, gyro_bias)
    return scale, gravity, accel_bias, cond


def build_refinement_system(
    inp: InitializationInput,
    g_approx: np.ndarray,
    gyro_bias: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked 3(N-2) x 6 system A [s, dtheta_xy, b_a] = b, with the gravity
    direction linearized around g_approx. Returns (A, b, R_WI)."""
    n = len(inp.keyframes)
    if n < 4:
        raise InsufficientDataError("need at least 4 keyframes")
    if gyro_bias is None:
        gyro_bias = np.zeros(3)
    big_g = inp.gravity_magnitude
    r_wi = gravity_alignment_rotation(g_approx)
    g_zero = r_wi @ GRAVITY_DOWN * big_g
    tilt_full = r_wi @ hat(GRAVITY_DOWN) * big_g  # d g / d dtheta (3x3)

    _, dvs, dps = _corrected_deltas(inp, gyro_bias)
    r_wb = inp.body_rotations()
    pres = inp.preintegrations

    a = np.zeros((3 * (n - 2), 6))
    b = np.zeros(3 * (n - 2))
    for i in range(n - 2):
        dt12, dt23, lam, cam_term = _triplet_geometry(inp, i)
        combo = 0.5 * (dt12**2 * dt23 + dt23**2 * dt12)
        accel_block = (
            r_wb[i] @ pres[i].dp_dba * dt23
            - r_wb[i + 1] @ pres[i + 1].dp_dba * dt12
            - r_wb[i] @ pres[i].dv_dba * dt12 * dt23
        )
        rows = slice(3 * i, 3 * i + 3)
        a[rows, 0] = lam
        a[rows, 1:3] = -combo * tilt_full[:, :2]
        a[rows, 3:6] = -accel_block
        b[rows] = (
            cam_term
            + r_wb[i] @ dps[i] * dt23
            - r_wb[i + 1] @ dps[i + 1] * dt12
            - r_wb[i] @ dvs[i] * dt12 * dt23
            - combo * g_zero
        )
    return a, b, r_wi


def _refine_single_pass(
    inp: InitializationInput,
    g_approx: np.ndarray,
    gyro_bias: np.ndarray | None = None,
) -> tuple[float, np.ndarray, np.ndarray, float]:
    a, b, r_wi = build_refinement_system(inp, g_approx, gyro_bias)
    x, cond = _solve_svd(a, b)
    scale = float(x[0])
    dtheta = np.array([x[1], x[2], 0.0])
    accel_bias = x[3:6]
    gravity = r_wi @ exp_so3(dtheta) @ GRAVITY_DOWN * inp.gravity_magnitude
    return scale, gravity, accel_bias, cond


def estimate_velocities(
    inp: InitializationInput,
    scale: float,
    gravity_w: np.ndarray,
    gyro_bias: np.ndarray,
    accel_bias: np.ndarray,
) -> np.ndarray:
    """Per-keyframe velocities by forward substitution of the position
    relations; the last keyframe uses the velocity relation instead."""
    n = len(inp.keyframes)
    kfs = inp.keyframes
    p_cb = inp.t_cb.translation
    r_wb = inp.body_rotations()
    _, dvs, dps = _corrected_deltas(inp, gyro_bias)
    pres = inp.preintegrations

    vel = np.zeros((n, 3))
    for i in range(n - 1):
        dt = kfs[i + 1].timestamp - kfs[i].timestamp
        dp_full = dps[i] + pres[i].dp_dba @ accel_bias
        vel[i] = (
            scale * (kfs[i + 1].p_wc - kfs[i].p_wc)
            - (kfs[i].r_wc - kfs[i + 1].r_wc) @ p_cb
            - 0.5 * gravity_w * dt * dt
            - r_wb[i] @ dp_full
        ) / dt
    dt_last = kfs[-1].timestamp - kfs[-2].timestamp
    dv_full = dvs[-1] + pres[-1].dv_dba @ accel_bias
    vel[n - 1] = vel[n - 2] + gravity_w * dt_last + r_wb[n - 2] @ dv_full
    return vel


def run_full_initialization(inp: InitializationInput) -> InitializationResult:
    """Run the four stages in order, re-correcting the preintegrated
    increments with the estimated gyro bias between stages."""
    gyro_bias = estimate_gyro_bias(inp)
    _, g_approx, cond2 = solve_scale_gravity(inp, gyro_bias)
    scale, gravity, accel_bias, cond3 = refine_with_accel_bias(inp, g_approx, gyro_bias)
    velocities = estimate_velocities(inp, scale, gravity, gyro_bias, accel_bias)
    return InitializationResult(
        scale=scale,
        gravity_w=gravity,
        gyro_bias=gyro_bias,
        accel_bias=accel_bias,
        velocities=velocities,
        condition_number_stage2=cond2,
        condition_number_stage3=cond3,
    )


def reinitialize_biases(
    frames: list[KeyframeVisualPose],
    preintegrations: list[PreintegratedImu],
    scale: float,
    gravity_w: np.ndarray,
    t_cb: RigidPose,
    gravity_magnitude: float = 9.81,
    expected_count: int = 20,
) -> ImuBias:
    """Bias re-estimation after relocalization from a fixed-length run of
    vision-localized frames, with scale and gravity treated as known."""
    if len(frames) != expected_count:
        raise InsufficientDataError(
            f"expected exactly {expected_count} consecutive frames, got {len(frames)}"
        )
    inp = InitializationInput(frames, preintegrations, t_cb, gravity_magnitude)
    gyro_bias = estimate_gyro_bias(inp)
    _, dvs, dps = _corrected_deltas(inp, gyro_bias)
    r_wb = inp.body_rotations()
    pres = inp.preintegrations

    n = len(frames)
    a = np.zeros((3 * (n - 2), 3))
    b = np.zeros(3 * (n - 2))
    for i in range(n - 2):
        dt12, dt23, lam, cam_term = _triplet_geometry(inp, i)
        combo = 0.5 * (dt12**2 * dt23 + dt23**2 * dt12)
        accel_block = (
            r_wb[i] @ pres[i].dp_dba * dt23
            - r_wb[i + 1] @ pres[i + 1].dp_dba * dt12
            - r_wb[i] @ pres[i].dv_dba * dt12 * dt23
        )
        rows = slice(3 * i, 3 * i + 3)
        a[rows] = -accel_block
        b[rows] = (
            cam_term
            + r_wb[i] @ dps[i] * dt23
            - r_wb[i + 1] @ dps[i + 1] * dt12
            - r_wb[i] @ dvs[i] * dt12 * dt23
            - combo * np.asarray(gravity_w, dtype=float)
            - lam * scale
        )
    accel_bias, _ = _solve_svd(a, b)
    return ImuBias(gyro_bias, accel_bias)


# --- serialization of results (flat key-value record) -------------------------

RESULT_FIELDS = (
    "scale",
    "gravity_w",
    "gyro_bias",
    "accel_bias",
    "condition_number_stage2",
    "condition_number_stage3",
    "velocity_count",
)


def serialize_result(result: InitializationResult) -> str:
    """Flat key-value text record; vectors are space-separated components."""

    def vec(v):
        return " ".join(f"{x:.17g}" for x in np.asarray(v).ravel())

    lines = [
        f"scale = {result.scale:.17g}",
        f"gravity_w = {vec(result.gravity_w)}",
        f"gyro_bias = {vec(result.gyro_bias)}",
        f"accel_bias = {vec(result.accel_bias)}",
        f"condition_number_stage2 = {result.condition_number_stage2:.17g}",
        f"condition_number_stage3 = {result.condition_number_stage3:.17g}",
        f"velocity_count = {len(result.velocities)}",
    ]
    for k, v in enumerate(result.velocities):
        lines.append(f"velocity_{k} = {vec(v)}")
    return "\n".join(lines) + "\n"


def parse_result(text: str) -> InitializationResult:
    vals: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rhs = line.partition("=")
        vals[key.strip()] = rhs.strip()

    def vec(key):
        return np.array([float(x) for x in vals[key].split()])

    count = int(vals["velocity_count"])
    velocities = np.stack([vec(f"velocity_{k}") for k in range(count)])
    return InitializationResult(
        scale=float(vals["scale"]),
        gravity_w=vec("gravity_w"),
        gyro_bias=vec("gyro_bias"),
        accel_bias=vec("accel_bias"),
        velocities=velocities,
        condition_number_stage2=float(vals["condition_number_stage2"]),
        condition_number_stage3=float(vals["condition_number_stage3"]),
    )
