"""Trajectory evaluation: timestamp association, similarity alignment,
absolute trajectory error, and KITTI-style relative pose error over fixed
ground-truth path lengths.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientDataError

DEFAULT_RPE_DELTAS = (5.0, 10.0, 15.0, 20.0, 25.0, 30.0)


@dataclass
class Trajectory:
    """Timestamped positions with optional orientations."""

    times: np.ndarray  # (n,)
    positions: np.ndarray  # (n, 3)
    rotations: np.ndarray | None = None  # (n, 3, 3)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.positions = np.asarray(self.positions, dtype=float)
        if self.rotations is not None:
            self.rotations = np.asarray(self.rotations, dtype=float)

    def __len__(self) -> int:
        return self.times.shape[0]

    def subset(self, idx: np.ndarray) -> "Trajectory":
        rot = self.rotations[idx] if self.rotations is not None else None
        return Trajectory(self.times[idx], self.positions[idx], rot)


def associate(
    traj_a: Trajectory, traj_b: Trajectory, max_dt: float = 0.02
) -> tuple[np.ndarray, np.ndarray]:
    """Match poses by nearest timestamp within max_dt, each used once.

    Both time arrays must be sorted; the greedy sweep reproduces optimal
    assignment whenever timestamp jitter is below half the sample spacing.
    """
    ia, ib = 0, 0
    out_a, out_b = [], []
    ta, tb = traj_a.times, traj_b.times
    while ia < len(ta) and ib < len(tb):
        dt = ta[ia] - tb[ib]
        if abs(dt) <= max_dt:
            # commit unless the next candidate on either side is closer
            if ia + 1 < len(ta) and abs(ta[ia + 1] - tb[ib]) < abs(dt):
                ia += 1
                continue
            if ib + 1 < len(tb) and abs(ta[ia] - tb[ib + 1]) < abs(dt):
                ib += 1
                continue
            out_a.append(ia)
            out_b.append(ib)
            ia += 1
            ib += 1
        elif dt < 0:
            ia += 1
        else:
            ib += 1
    if not out_a:
        raise InsufficientDataError("no timestamp matches within tolerance")
    return np.array(out_a), np.array(out_b)


@dataclass
class AlignmentResult:
    """Similarity est ~ scale * R @ gt + t fitted by least squares."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float
    rmse_after_alignment: float

    @property
    def scale_error_percent(self) -> float:
        return abs(1.0 - self.scale) * 100.0


def align_similarity(
    est_positions: np.ndarray,
    gt_positions: np.ndarray,
    fix_scale: bool = False,
) -> AlignmentResult:
    """Closed-form least-squares similarity (rigid when fix_scale) between
    matched position sets; the reported scale is the size of the estimate
    relative to the ground truth, and the RMSE is in ground-truth units."""
    est = np.asarray(est_positions, dtype=float)
    gt = np.asarray(gt_positions, dtype=float)
    if est.shape != gt.shape or est.shape[0] < 3:
        raise InsufficientDataError("need at least 3 matched position pairs")
    mu_e = est.mean(axis=0)
    mu_g = gt.mean(axis=0)
    x = gt - mu_g
    y = est - mu_e
    cov = y.T @ x / est.shape[0]
    u, d, vt = np.linalg.svd(cov)
    if d[1] < 1e-12 * max(d[0], 1e-300):
        raise InsufficientDataError("degenerate (collinear) point configuration")
    s_mat = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_mat[2, 2] = -1.0
    rot = u @ s_mat @ vt
    if fix_scale:
        scale = 1.0
    else:
        var_g = float((x * x).sum()) / est.shape[0]
        scale = float(np.trace(np.diag(d) @ s_mat)) / var_g
    trans = mu_e - scale * rot @ mu_g

    mapped_back = ((est - trans) / scale) @ rot  # rows are R^T (est - t) / s
    rmse = float(np.sqrt(np.mean(np.sum((mapped_back - gt) ** 2, axis=1))))
    return AlignmentResult(rot, trans, scale, rmse)


def ate_rmse(
    est_positions: np.ndarray,
    gt_positions: np.ndarray,
    alignment: AlignmentResult,
) -> float:
    """RMSE of aligned position differences, in ground-truth units."""
    est = np.asarray(est_positions, dtype=float)
    gt = np.asarray(gt_positions, dtype=float)
    mapped_back = ((est - alignment.translation) / alignment.scale) @ alignment.rotation
    return float(np.sqrt(np.mean(np.sum((mapped_back - gt) ** 2, axis=1))))


@dataclass
class RpeBin:
    delta: float
    count: int
    median: float
    p5: float
    p95: float


@dataclass
class RpeCurve:
    """Per-path-length relative translation error statistics."""

    bins: list[RpeBin] = field(default_factory=list)

    def median_at(self, delta: float) -> float:
        for b in self.bins:
            if abs(b.delta - delta) < 1e-9:
                return b.median
        raise KeyError(f"no RPE bin at delta {delta}")


def relative_pose_error(
    est: Trajectory,
    gt: Trajectory,
    deltas: tuple[float, ...] = DEFAULT_RPE_DELTAS,
) -> RpeCurve:
    """Relative translation error over all sub-segments whose ground-truth
    path length first reaches each delta; empty bins are omitted.

    Requires orientations on both trajectories (the relative error is
    expressed in the starting frame of each segment).
    """
    if est.rotations is None or gt.rotations is None:
        raise InsufficientDataError("relative pose error requires orientations")
    steps = np.linalg.norm(np.diff(gt.positions, axis=0), axis=1)
    cumlen = np.concatenate([[0.0], np.cumsum(steps)])
    n = len(gt.times)
    curve = RpeCurve()
    for delta in deltas:
        errs = []
        ends = np.searchsorted(cumlen, cumlen + delta)
        for i in range(n):
            j = ends[i]
            if j >= n:
                break
            rel_gt_r = gt.rotations[i].T @ gt.rotations[j]
            rel_gt_t = gt.rotations[i].T @ (gt.positions[j] - gt.positions[i])
            rel_est_r = est.rotations[i].T @ est.rotations[j]
            rel_est_t = est.rotations[i].T @ (est.positions[j] - est.positions[i])
            err_t = rel_gt_r.T @ (rel_est_t - rel_gt_t)
            errs.append(np.linalg.norm(err_t))
        if errs:
            arr = np.array(errs)
            curve.bins.append(
                RpeBin(
                    delta=float(delta),
                    count=int(arr.size),
                    median=float(np.median(arr)),
                    p5=float(np.percentile(arr, 5)),
                    p95=float(np.percentile(arr, 95)),
                )
            )
    return curve


def evaluate_pair(
    est: Trajectory,
    gt: Trajectory,
    max_dt: float = 0.02,
    fix_scale: bool = False,
    rpe_deltas: tuple[float, ...] = DEFAULT_RPE_DELTAS,
) -> dict:
    """Associate, align and compute ATE plus (when orientations allow) RPE."""
    ia, ib = associate(est, gt, max_dt)
    est_m, gt_m = est.subset(ia), gt.subset(ib)
    alignment = align_similarity(est_m.positions, gt_m.positions, fix_scale=fix_scale)
    out = {
        "matches": int(len(ia)),
        "ate_rmse": ate_rmse(est_m.positions, gt_m.positions, alignment),
        "scale": alignment.scale,
        "scale_error_percent": alignment.scale_error_percent,
        "alignment": alignment,
    }
    if est_m.rotations is not None and gt_m.rotations is not None:
        out["rpe"] = relative_pose_error(est_m, gt_m, rpe_deltas)
    return out


def metrics_csv(result: dict) -> str:
    """Flat CSV report: one row per metric or RPE bin."""
    lines = ["metric,delta,value"]
    lines.append(f"ate_rmse,,{result['ate_rmse']:.9g}")
    lines.append(f"scale,,{result['scale']:.9g}")
    lines.append(f"scale_error_percent,,{result['scale_error_percent']:.9g}")
    lines.append(f"matches,,{result['matches']}")
    rpe = result.get("rpe")
    if rpe is not None:
        for b in rpe.bins:
            lines.append(f"rpe_median,{b.delta:.9g},{b.median:.9g}")
            lines.append(f"rpe_p5,{b.delta:.9g},{b.p5:.9g}")
            lines.append(f"rpe_p95,{b.delta:.9g},{b.p95:.9g}")
            lines.append(f"rpe_count,{b.delta:.9g},{b.count}")
    return "\n".join(lines) + "\n"


def rpe_plot_csv(rpe: RpeCurve) -> str:
    """Plot-data file: delta, median, p5, p95 per bin."""
    lines = ["delta,median,p5,p95"]
    for b in rpe.bins:
        lines.append(f"{b.delta:.9g},{b.median:.9g},{b.p5:.9g},{b.p95:.9g}")
    return "\n".join(lines) + "\n"
