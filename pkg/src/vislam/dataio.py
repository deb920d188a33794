"""File ingestion and export: EuRoC-layout sensor CSVs, TUM trajectory
files, and a flat key-value calibration document.

Raw timestamps are integer nanoseconds at the I/O boundary; internal time
is float seconds relative to a caller-chosen origin so that epoch-scale
timestamps lose no precision.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation as ScipyRotation

from .errors import DataFormatError
from .estimator.factors import PinholeCamera
from .manifold import RigidPose
from .preintegration import ImuMeasurement, ImuNoiseModel

IMU_HEADER = (
    "#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],"
    "a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]"
)
GT_HEADER = (
    "#timestamp,p_RS_R_x [m],p_RS_R_y [m],p_RS_R_z [m],"
    "q_RS_w [],q_RS_x [],q_RS_y [],q_RS_z [],"
    "v_RS_R_x [m s^-1],v_RS_R_y [m s^-1],v_RS_R_z [m s^-1],"
    "b_w_RS_S_x [rad s^-1],b_w_RS_S_y [rad s^-1],b_w_RS_S_z [rad s^-1],"
    "b_a_RS_S_x [m s^-2],b_a_RS_S_y [m s^-2],b_a_RS_S_z [m s^-2]"
)
POSE_HEADER = (
    "#timestamp,p_RS_R_x [m],p_RS_R_y [m],p_RS_R_z [m],"
    "q_RS_w [],q_RS_x [],q_RS_y [],q_RS_z []"
)


@dataclass(frozen=True)
class EurocImuRecord:
    """Raw IMU row: exact integer nanoseconds plus sensor values."""

    timestamp_ns: int
    omega: np.ndarray
    accel: np.ndarray


@dataclass
class GroundTruthRecord:
    timestamp_ns: int
    position: np.ndarray
    rotation: np.ndarray | None = None  # 3x3
    velocity: np.ndarray | None = None
    gyro_bias: np.ndarray | None = None
    accel_bias: np.ndarray | None = None


@dataclass
class TimedPose:
    timestamp: float
    rotation: np.ndarray
    position: np.ndarray
    # exact quaternion as read from disk; kept so write(read(f)) == f bytewise
    quat_xyzw: np.ndarray | None = None


def _parse_floats(parts: list[str], path: str, lineno: int) -> list[float]:
    try:
        vals = [float(x) for x in parts]
    except ValueError as exc:
        raise DataFormatError(f"{path}:{lineno}: unparsable number ({exc})") from exc
    if not all(np.isfinite(vals)):
        raise DataFormatError(f"{path}:{lineno}: non-finite value")
    return vals


def read_imu_csv(path: str | os.PathLike) -> list[EurocImuRecord]:
    """Parse an EuRoC imu0 data.csv: ns timestamp, 3 gyro, 3 accel columns."""
    records: list[EurocImuRecord] = []
    last_ts = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise DataFormatError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            try:
                ts = int(parts[0])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad timestamp {parts[0]!r}") from exc
            vals = _parse_floats(parts[1:], str(path), lineno)
            if last_ts is not None and ts <= last_ts:
                raise DataFormatError(f"{path}:{lineno}: non-monotone timestamp")
            last_ts = ts
            records.append(EurocImuRecord(ts, np.array(vals[0:3]), np.array(vals[3:6])))
    return records


def imu_records_to_measurements(
    records: list[EurocImuRecord], origin_ns: int = 0
) -> list[ImuMeasurement]:
    """Convert raw records to second-based measurements relative to origin_ns.

    Subtracting the origin before the float division keeps sub-nanosecond
    precision for any realistic stream span.
    """
    return [
        ImuMeasurement((r.timestamp_ns - origin_ns) / 1e9, r.omega, r.accel)
        for r in records
    ]


def _quat_wxyz_to_matrix(q: np.ndarray, path: str, lineno: int) -> np.ndarray:
    norm = np.linalg.norm(q)
    if abs(norm - 1.0) > 1e-3:
        raise DataFormatError(f"{path}:{lineno}: quaternion norm {norm:.6f} too far from 1")
    q = q / norm
    return ScipyRotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()


def read_groundtruth_csv(path: str | os.PathLike) -> list[GroundTruthRecord]:
    """Parse EuRoC ground-truth CSVs: 17 columns (state estimate), 8 columns
    (pose-only), or 4 columns (position-only) after the timestamp-included
    count. Capability of the records depends on the column count."""
    records: list[GroundTruthRecord] = []
    last_ts = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) not in (4, 8, 17):
                raise DataFormatError(
                    f"{path}:{lineno}: expected 4, 8 or 17 fields, got {len(parts)}"
                )
            try:
                ts = int(parts[0])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: bad timestamp {parts[0]!r}") from exc
            if last_ts is not None and ts <= last_ts:
                raise DataFormatError(f"{path}:{lineno}: non-monotone timestamp")
            last_ts = ts
            vals = _parse_floats(parts[1:], str(path), lineno)
            rec = GroundTruthRecord(ts, np.array(vals[0:3]))
            if len(parts) >= 8:
                rec.rotation = _quat_wxyz_to_matrix(np.array(vals[3:7]), str(path), lineno)
            if len(parts) == 17:
                rec.velocity = np.array(vals[7:10])
                rec.gyro_bias = np.array(vals[10:13])
                rec.accel_bias = np.array(vals[13:16])
            records.append(rec)
    return records


def apply_time_offset(measurements: list, offset: float) -> list:
    """Shift the float timestamps of measurements/poses by offset seconds."""
    from dataclasses import replace

    return [replace(m, timestamp=m.timestamp + offset) for m in measurements]


# --- TUM trajectory files -----------------------------------------------------


def _matrix_to_quat_xyzw(rot: np.ndarray) -> np.ndarray:
    q = ScipyRotation.from_matrix(rot).as_quat()
    if q[3] < 0:
        q = -q
    return q


def write_trajectory_tum(poses: list[TimedPose], path: str | os.PathLike) -> None:
    """One line per pose: 'timestamp tx ty tz qx qy qz qw', timestamps with
    9 decimals, components round-trip exact (17 significant digits), qw >= 0."""
    with open(path, "w", encoding="utf-8") as fh:
        for pose in poses:
            q = pose.quat_xyzw if pose.quat_xyzw is not None else _matrix_to_quat_xyzw(pose.rotation)
            vals = " ".join(f"{v:.17g}" for v in (*pose.position, *q))
            fh.write(f"{pose.timestamp:.9f} {vals}\n")


def read_trajectory_tum(path: str | os.PathLike) -> list[TimedPose]:
    poses: list[TimedPose] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DataFormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            vals = _parse_floats(parts, str(path), lineno)
            q = np.array([vals[7], vals[4], vals[5], vals[6]])  # wxyz
            rot = _quat_wxyz_to_matrix(q, str(path), lineno)
            poses.append(
                TimedPose(vals[0], rot, np.array(vals[1:4]), quat_xyzw=np.array(vals[4:8]))
            )
    return poses


def trajectory_from_tum(poses: list[TimedPose]):
    from .evaluation import Trajectory

    return Trajectory(
        np.array([p.timestamp for p in poses]),
        np.stack([p.position for p in poses]),
        np.stack([p.rotation for p in poses]),
    )


# --- calibration ---------------------------------------------------------------


@dataclass
class CalibrationConfig:
    t_cb: RigidPose
    camera: PinholeCamera
    noise: ImuNoiseModel


CALIB_KEYS = (
    "t_cb_rotation",
    "t_cb_translation",
    "fu",
    "fv",
    "cu",
    "cv",
    "image_width",
    "image_height",
    "gyro_noise_density",
    "accel_noise_density",
    "gyro_walk",
    "accel_walk",
    "gravity_magnitude",
)


def write_calibration(calib: CalibrationConfig, path: str | os.PathLike) -> None:
    """Flat key-value document; rotation stored row-major."""
    cam, noi = calib.camera, calib.noise
    rows = [
        "t_cb_rotation = " + " ".join(f"{v:.17g}" for v in calib.t_cb.rotation.ravel()),
        "t_cb_translation = " + " ".join(f"{v:.17g}" for v in calib.t_cb.translation),
        f"fu = {cam.fu:.17g}",
        f"fv = {cam.fv:.17g}",
        f"cu = {cam.cu:.17g}",
        f"cv = {cam.cv:.17g}",
        f"image_width = {cam.width:.17g}",
        f"image_height = {cam.height:.17g}",
        f"gyro_noise_density = {noi.gyro_noise_density:.17g}",
        f"accel_noise_density = {noi.accel_noise_density:.17g}",
        f"gyro_walk = {noi.gyro_walk:.17g}",
        f"accel_walk = {noi.accel_walk:.17g}",
        f"gravity_magnitude = {noi.gravity_magnitude:.17g}",
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")


def read_calibration(path: str | os.PathLike) -> CalibrationConfig:
    vals: dict[str, list[float]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, rhs = line.partition("=")
            if not sep:
                raise DataFormatError(f"{path}:{lineno}: expected 'key = value'")
            vals[key.strip()] = _parse_floats(rhs.split(), str(path), lineno)
    missing = [k for k in CALIB_KEYS if k not in vals]
    if missing:
        raise DataFormatError(f"{path}: missing calibration keys: {', '.join(missing)}")
    rot = np.array(vals["t_cb_rotation"]).reshape(3, 3)
    return CalibrationConfig(
        t_cb=RigidPose(rot, np.array(vals["t_cb_translation"])),
        camera=PinholeCamera(
            fu=vals["fu"][0],
            fv=vals["fv"][0],
            cu=vals["cu"][0],
            cv=vals["cv"][0],
            width=vals["image_width"][0],
            height=vals["image_height"][0],
        ),
        noise=ImuNoiseModel(
            gyro_noise_density=vals["gyro_noise_density"][0],
            accel_noise_density=vals["accel_noise_density"][0],
            gyro_walk=vals["gyro_walk"][0],
            accel_walk=vals["accel_walk"][0],
            gravity_magnitude=vals["gravity_magnitude"][0],
        ),
    )


# --- dataset directory (EuRoC layout plus synthetic extras) --------------------


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def write_euroc_dataset(data, root: str | os.PathLike) -> None:
    """Write a simulation to disk in EuRoC layout.

    mav0/imu0/data.csv               IMU stream
    mav0/state_groundtruth_estimate0/data.csv   full ground truth
    mav0/keyframes0/data.csv         monocular-scale visual keyframe poses
    mav0/cam0/observations.csv       per-frame landmark observations
    mav0/loops0/data.csv             loop-closure oracle edges
    calibration.txt                  flat key-value calibration
    """
    root = str(root)
    for sub in ("imu0", "state_groundtruth_estimate0", "keyframes0", "cam0", "loops0"):
        os.makedirs(os.path.join(root, "mav0", sub), exist_ok=True)

    with open(os.path.join(root, "mav0", "imu0", "data.csv"), "w", encoding="utf-8") as fh:
        fh.write(IMU_HEADER + "\n")
        for t, w, a in zip(data.imu_times, data.imu_omega, data.imu_accel):
            ns = int(round(t * 1e9))
            fh.write(
                f"{ns},{_fmt(w[0])},{_fmt(w[1])},{_fmt(w[2])},"
                f"{_fmt(a[0])},{_fmt(a[1])},{_fmt(a[2])}\n"
            )

    gt = data.ground_truth
    with open(
        os.path.join(root, "mav0", "state_groundtruth_estimate0", "data.csv"),
        "w",
        encoding="utf-8",
    ) as fh:
        fh.write(GT_HEADER + "\n")
        n_meas = gt.gyro_bias.shape[0]
        for k in range(gt.times.shape[0]):
            ns = int(round(gt.times[k] * 1e9))
            q = _matrix_to_quat_xyzw(gt.rotations[k])
            bk = min(k, n_meas - 1)
            row = (
                [str(ns)]
                + [_fmt(v) for v in gt.positions[k]]
                + [_fmt(q[3]), _fmt(q[0]), _fmt(q[1]), _fmt(q[2])]
                + [_fmt(v) for v in gt.velocities[k]]
                + [_fmt(v) for v in gt.gyro_bias[bk]]
                + [_fmt(v) for v in gt.accel_bias[bk]]
            )
            fh.write(",".join(row) + "\n")

    times = data.keyframe_times
    with open(os.path.join(root, "mav0", "keyframes0", "data.csv"), "w", encoding="utf-8") as fh:
        fh.write(POSE_HEADER + "\n")
        for k in range(times.shape[0]):
            ns = int(round(times[k] * 1e9))
            q = _matrix_to_quat_xyzw(data.keyframe_rotations_wc[k])
            row = (
                [str(ns)]
                + [_fmt(v) for v in data.keyframe_positions_vis[k]]
                + [_fmt(q[3]), _fmt(q[0]), _fmt(q[1]), _fmt(q[2])]
            )
            fh.write(",".join(row) + "\n")

    with open(os.path.join(root, "mav0", "cam0", "observations.csv"), "w", encoding="utf-8") as fh:
        fh.write("#timestamp [ns],landmark_id,u [px],v [px]\n")
        for frame in data.frames:
            ns = int(round(frame.timestamp * 1e9))
            for lid, px in zip(frame.landmark_ids, frame.pixels):
                fh.write(f"{ns},{int(lid)},{_fmt(px[0])},{_fmt(px[1])}\n")

    with open(os.path.join(root, "mav0", "loops0", "data.csv"), "w", encoding="utf-8") as fh:
        fh.write("#timestamp_a [ns],timestamp_b [ns],landmark_ids (;-separated)\n")
        for e in data.loop_edges:
            ids = ";".join(str(int(i)) for i in e.landmark_ids)
            fh.write(f"{int(round(e.timestamp_a * 1e9))},{int(round(e.timestamp_b * 1e9))},{ids}\n")
    with open(os.path.join(root, "mav0", "loops0", "points.csv"), "w", encoding="utf-8") as fh:
        fh.write("#edge_index,landmark_id,ax,ay,az,bx,by,bz\n")
        for k, e in enumerate(data.loop_edges):
            for lid, pa, pb in zip(e.landmark_ids, e.points_a, e.points_b):
                row = [str(k), str(int(lid))] + [_fmt(v) for v in (*pa, *pb)]
                fh.write(",".join(row) + "\n")

    calib = CalibrationConfig(t_cb=data.t_cb, camera=data.camera, noise=data.config.noise)
    write_calibration(calib, os.path.join(root, "calibration.txt"))


@dataclass
class DatasetBundle:
    """In-memory view of an on-disk dataset, timestamps relative to the
    first IMU sample."""

    origin_ns: int
    imu: list[ImuMeasurement]
    imu_dt: float
    groundtruth: list[GroundTruthRecord]
    keyframes: list[GroundTruthRecord]  # position in monocular units
    observations: dict[int, list[tuple[int, np.ndarray]]]  # ns -> [(lm id, pixel)]
    loop_edges: list[tuple[int, int, np.ndarray, np.ndarray, np.ndarray]]
    calibration: CalibrationConfig

    def keyframe_time(self, record: GroundTruthRecord) -> float:
        return (record.timestamp_ns - self.origin_ns) / 1e9


def load_euroc_dataset(root: str | os.PathLike, calib_path: str | os.PathLike | None = None) -> DatasetBundle:
    """Read a dataset directory written by write_euroc_dataset (or a real
    EuRoC folder holding at least imu0 and a ground-truth file)."""
    root = str(root)
    imu_records = read_imu_csv(os.path.join(root, "mav0", "imu0", "data.csv"))
    if not imu_records:
        raise DataFormatError(f"{root}: empty IMU stream")
    origin = imu_records[0].timestamp_ns
    imu = imu_records_to_measurements(imu_records, origin)
    dts = np.diff([m.timestamp for m in imu])
    imu_dt = float(np.median(dts)) if dts.size else 0.0

    gt_path = None
    for cand in ("state_groundtruth_estimate0", "vicon0", "leica0"):
        p = os.path.join(root, "mav0", cand, "data.csv")
        if os.path.exists(p):
            gt_path = p
            break
    groundtruth = read_groundtruth_csv(gt_path) if gt_path else []

    kf_path = os.path.join(root, "mav0", "keyframes0", "data.csv")
    keyframes = read_groundtruth_csv(kf_path) if os.path.exists(kf_path) else []

    observations: dict[int, list[tuple[int, np.ndarray]]] = {}
    obs_path = os.path.join(root, "mav0", "cam0", "observations.csv")
    if os.path.exists(obs_path):
        with open(obs_path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split(",")
                if len(parts) != 4:
                    raise DataFormatError(f"{obs_path}:{lineno}: expected 4 fields")
                ts = int(parts[0])
                vals = _parse_floats(parts[1:], obs_path, lineno)
                observations.setdefault(ts, []).append(
                    (int(vals[0]), np.array(vals[1:3]))
                )

    loop_edges: list[tuple[int, int, np.ndarray, np.ndarray, np.ndarray]] = []
    loops_path = os.path.join(root, "mav0", "loops0", "data.csv")
    if os.path.exists(loops_path):
        raw_edges = []
        with open(loops_path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split(",")
                if len(parts) != 3:
                    raise DataFormatError(f"{loops_path}:{lineno}: expected 3 fields")
                ids = np.array([int(x) for x in parts[2].split(";") if x])
                raw_edges.append((int(parts[0]), int(parts[1]), ids))
        points_path = os.path.join(root, "mav0", "loops0", "points.csv")
        pts: dict[int, dict[int, tuple[np.ndarray, np.ndarray]]] = {}
        if os.path.exists(points_path):
            with open(points_path, "r", encoding="utf-8") as fh:
                for lineno, raw in enumerate(fh, start=1):
                    line = raw.strip()
                    if not line or line.startswith("#"):
                        continue
                    parts = line.split(",")
                    if len(parts) != 8:
                        raise DataFormatError(f"{points_path}:{lineno}: expected 8 fields")
                    vals = _parse_floats(parts[2:], points_path, lineno)
                    pts.setdefault(int(parts[0]), {})[int(parts[1])] = (
                        np.array(vals[0:3]),
                        np.array(vals[3:6]),
                    )
        for k, (ta, tb, ids) in enumerate(raw_edges):
            table = pts.get(k, {})
            pa = np.array([table[i][0] for i in ids if i in table])
            pb = np.array([table[i][1] for i in ids if i in table])
            kept = np.array([i for i in ids if i in table])
            loop_edges.append((ta, tb, kept, pa, pb))

    if calib_path is None:
        calib_path = os.path.join(root, "calibration.txt")
    calibration = read_calibration(calib_path)
    return DatasetBundle(
        origin_ns=origin,
        imu=imu,
        imu_dt=imu_dt,
        groundtruth=groundtruth,
        keyframes=keyframes,
        observations=observations,
        loop_edges=loop_edges,
        calibration=calibration,
    )
