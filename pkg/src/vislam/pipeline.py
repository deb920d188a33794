"""Deterministic sequential SLAM pipeline.

Models the tracking / local-mapping / loop-closing threads as one ordered
event loop: inertial initialization over an opening window, fixed-lag frame
tracking with a marginalization prior, keyframe insertion with local bundle
adjustment, oracle-driven loop closing with 6-DoF pose-graph correction,
and an optional final full bundle adjustment.

Landmark identity follows a visual-odometry reuse rule: a physical point
reobserved after leaving the recent-keyframe window becomes a new map
landmark, so drift behaves like odometry until a loop closure merges the
duplicates back into the original map points (slam mode only).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dataio import DatasetBundle, TimedPose
from .errors import InsufficientDataError, TrackingLostError
from .estimator.factors import Landmark, Observation, PinholeCamera
from .estimator.mapping import (
    Keyframe,
    KeyframeGraph,
    full_bundle_adjustment,
    local_bundle_adjustment,
    triangulate_point,
)
from .estimator.posegraph import (
    PoseGraphEdge,
    correct_velocities_after_loop,
    pose_graph_optimize,
    rigid_align_points,
)
from .estimator.tracking import (
    MarginalPrior,
    optimize_frame_pair_with_prior,
    optimize_frame_to_keyframe,
)
from .initializer import InitializationInput, InitializationResult, KeyframeVisualPose, run_full_initialization
from .manifold import RigidPose
from .preintegration import (
    ImuBias,
    ImuMeasurement,
    ImuNoiseModel,
    NavState,
    PreintegratedImu,
    predict,
    preintegrate,
)
from .simulator import SimulationData


@dataclass
class SequenceSource:
    """Uniform pipeline input assembled from a simulation or a dataset."""

    imu_times: np.ndarray
    imu_omega: np.ndarray
    imu_accel: np.ndarray
    imu_dt: float
    frame_times: np.ndarray
    frame_obs: list[tuple[np.ndarray, np.ndarray]]  # (true ids, pixels) per frame
    kf_times: np.ndarray  # visual keyframe poses for initialization
    kf_rotations_wc: np.ndarray
    kf_positions_vis: np.ndarray
    # (t_a, t_b, matched ids, exact points in body a, exact points in body b)
    loop_edges: list[tuple[float, float, np.ndarray, np.ndarray, np.ndarray]]
    camera: PinholeCamera
    t_cb: RigidPose
    noise: ImuNoiseModel

    @staticmethod
    def from_simulation(data: SimulationData) -> "SequenceSource":
        return SequenceSource(
            imu_times=data.imu_times,
            imu_omega=data.imu_omega,
            imu_accel=data.imu_accel,
            imu_dt=data.imu_dt,
            frame_times=np.array([f.timestamp for f in data.frames]),
            frame_obs=[(f.landmark_ids, f.pixels) for f in data.frames],
            kf_times=data.keyframe_times,
            kf_rotations_wc=data.keyframe_rotations_wc,
            kf_positions_vis=data.keyframe_positions_vis,
            loop_edges=[
                (e.timestamp_a, e.timestamp_b, e.landmark_ids, e.points_a, e.points_b)
                for e in data.loop_edges
            ],
            camera=data.camera,
            t_cb=data.t_cb,
            noise=data.config.noise,
        )

    @staticmethod
    def from_dataset(bundle: DatasetBundle) -> "SequenceSource":
        frame_ts = sorted(bundle.observations)
        frame_times = np.array([(t - bundle.origin_ns) / 1e9 for t in frame_ts])
        frame_obs = []
        for t in frame_ts:
            rows = bundle.observations[t]
            frame_obs.append(
                (np.array([r[0] for r in rows]), np.stack([r[1] for r in rows]))
                if rows
                else (np.zeros(0, dtype=int), np.zeros((0, 2)))
            )
        kfs = bundle.keyframes
        if not kfs:
            raise InsufficientDataError("dataset has no visual keyframe poses")
        return SequenceSource(
            imu_times=np.array([m.timestamp for m in bundle.imu]),
            imu_omega=np.stack([m.omega for m in bundle.imu]),
            imu_accel=np.stack([m.accel for m in bundle.imu]),
            imu_dt=bundle.imu_dt,
            frame_times=frame_times,
            frame_obs=frame_obs,
            kf_times=np.array([bundle.keyframe_time(k) for k in kfs]),
            kf_rotations_wc=np.stack([k.rotation for k in kfs]),
            kf_positions_vis=np.stack([k.position for k in kfs]),
            loop_edges=[
                ((a - bundle.origin_ns) / 1e9, (b - bundle.origin_ns) / 1e9, ids, pa, pb)
                for a, b, ids, pa, pb in bundle.loop_edges
            ],
            camera=bundle.calibration.camera,
            t_cb=bundle.calibration.t_cb,
            noise=bundle.calibration.noise,
        )

    def imu_segment(self, t0: float, t1: float) -> tuple[list[ImuMeasurement], np.ndarray]:
        eps = 0.25 * self.imu_dt
        mask = (self.imu_times >= t0 - eps) & (self.imu_times < t1 - eps)
        ms = [
            ImuMeasurement(float(t), w, a)
            for t, w, a in zip(self.imu_times[mask], self.imu_omega[mask], self.imu_accel[mask])
        ]
        return ms, np.full(len(ms), self.imu_dt)


@dataclass
class PipelineConfig:
    mode: str = "slam"  # slam | odometry | localization
    init_window_sec: float = 15.0
    init_keyframe_interval: float = 0.25
    keyframe_interval: float = 0.25
    n_local: int = 10
    full_ba_after_init: bool = True
    final_full_ba: bool = False
    obs_sigma: float = 1.0
    min_track_observations: int = 6
    max_new_landmark_reproj_px: float = 4.0
    reuse_window: int = 12  # keyframes a landmark stays active after last sighting
    loop_edge_info: float = 1e4
    seq_edge_info: float = 1.0
    loop_min_interval: float = 4.0  # seconds between accepted loop closures
    loop_delay: float = 1.0  # let revisit landmarks mature before closing
    loop_min_observers: int = 4  # alignment uses only well-observed landmarks
    # pose-graph correction fires only when the measured loop discrepancy
    # exceeds what map reuse absorbs on its own; below it, only merge
    # below these discrepancies, landmark merging alone absorbs the loop;
    # above them the 6-DoF pose graph fires, followed by a repair full BA
    pgo_min_translation: float = 0.15
    pgo_min_rotation: float = 0.08
    full_ba_after_pgo_iters: int = 8
    local_ba_iters: int = 8


@dataclass
class PipelineResult:
    keyframe_poses: list[TimedPose]
    frame_poses: list[TimedPose]
    init_result: InitializationResult
    graph: KeyframeGraph
    events: list[str] = field(default_factory=list)
    tracking_lost_at: float | None = None
    full_ba_report: object | None = None


def _body_pose(state: NavState) -> RigidPose:
    return RigidPose(state.rotation, state.position)


class SlamPipeline:
    """Single-sequence pipeline; construct, then call run()."""

    def __init__(self, source: SequenceSource, config: PipelineConfig | None = None):
        self.src = source
        self.cfg = config or PipelineConfig()
        self.events: list[str] = []
        self.graph: KeyframeGraph | None = None
        self.init_result: InitializationResult | None = None
        # landmark bookkeeping
        self.lm_true_id: dict[int, int] = {}
        self.lm_ref_kf: dict[int, int] = {}
        self.active_by_true: dict[int, int] = {}
        self.pending: dict[int, list[tuple[int, np.ndarray]]] = {}
        self.next_lm_id = 0
        self.next_kf_id = 0
        self.frame_log: list[tuple[float, int, RigidPose]] = []  # (t, ref kf, T_rel)
        self.kf_insert_times: list[float] = []
        # accepted loop constraints, retained across pose-graph runs so that
        # previously closed regions stay pinned
        self.loop_constraints: list[tuple[int, int, RigidPose]] = []
        self.last_loop_time = -np.inf

    # --- initialization -------------------------------------------------------

    def _init_keyframe_indices(self) -> np.ndarray:
        """Subsample the source keyframes to the init spacing, inside the
        opening window."""
        idx = []
        last = -np.inf
        for k, t in enumerate(self.src.kf_times):
            if t > self.cfg.init_window_sec + 1e-9:
                break
            if t - last >= self.cfg.init_keyframe_interval - 1e-9:
                idx.append(k)
                last = t
        if len(idx) < 4:
            raise InsufficientDataError("initialization window holds fewer than 4 keyframes")
        return np.array(idx)

    def _initialize(self) -> None:
        src, cfg = self.src, self.cfg
        idx = self._init_keyframe_indices()
        kfs = [
            KeyframeVisualPose(
                id=k,
                timestamp=float(src.kf_times[i]),
                r_wc=src.kf_rotations_wc[i],
                p_wc=src.kf_positions_vis[i],
            )
            for k, i in enumerate(idx)
        ]
        pres = []
        for a, b in zip(kfs, kfs[1:]):
            ms, dts = src.imu_segment(a.timestamp, b.timestamp)
            pres.append(preintegrate(ms, dts, src.noise))
        inp = InitializationInput(kfs, pres, src.t_cb, src.noise.gravity_magnitude)
        result = run_full_initialization(inp)
        self.init_result = result
        self.events.append(f"initialized at t={kfs[-1].timestamp:.3f} scale={result.scale:.6f}")

        bias = ImuBias(result.gyro_bias, result.accel_bias)
        graph = KeyframeGraph(
            camera=src.camera,
            t_cb=src.t_cb,
            gravity=result.gravity_w,
            noise=src.noise,
            n_local=cfg.n_local,
        )
        r_cb, p_cb = src.t_cb.rotation, src.t_cb.translation
        frame_of_kf: list[int] = []
        for k, (vis, i) in enumerate(zip(kfs, idx)):
            r_wb = vis.r_wc @ r_cb
            p_wb = result.scale * vis.p_wc + vis.r_wc @ p_cb
            state = NavState(r_wb, p_wb, result.velocities[k], bias, vis.timestamp)
            pre = pres[k - 1] if k > 0 else None
            if pre is not None:
                pre = replace(pre, bias_lin=ImuBias())  # integrated at zero bias
            graph.insert(Keyframe(k, state, [], pre))
            frame_of_kf.append(int(np.searchsorted(src.frame_times, vis.timestamp - 1e-9)))
        self.next_kf_id = len(kfs)
        self.graph = graph
        self.kf_insert_times = [kf.timestamp for kf in kfs]

        # create landmarks by multi-view triangulation from the metric poses
        sightings: dict[int, list[tuple[int, np.ndarray]]] = {}
        for kf_id, fi in enumerate(frame_of_kf):
            ids, pixels = src.frame_obs[fi]
            for lid, px in zip(ids, pixels):
                sightings.setdefault(int(lid), []).append((kf_id, px))
        for true_id, rows in sorted(sightings.items()):
            if len(rows) < 2:
                continue
            self._create_landmark(true_id, rows)

        if cfg.full_ba_after_init:
            report = full_bundle_adjustment(self.graph, max_iters=40)
            self.events.append(
                f"init full BA: {report.iterations} iters, cost {report.initial_cost:.3e}"
                f" -> {report.final_cost:.3e}"
            )
        self._refresh_active()

    # --- landmark management ----------------------------------------------------

    def _camera_pose(self, kf_id: int) -> tuple[np.ndarray, np.ndarray]:
        state = self.graph.keyframes[kf_id].state
        r_wc = state.rotation @ self.src.t_cb.rotation.T
        p_wc = state.position - r_wc @ self.src.t_cb.translation
        return r_wc, p_wc

    def _create_landmark(self, true_id: int, rows: list[tuple[int, np.ndarray]]) -> bool:
        poses = [self._camera_pose(kf_id) for kf_id, _ in rows]
        pixels = np.stack([px for _, px in rows])
        try:
            point = triangulate_point(poses, pixels, self.src.camera)
        except Exception:
            return False
        info = np.eye(2) / self.cfg.obs_sigma**2
        # accept only when the point reprojects acceptably in every view
        for (r_wc, p_wc), px in zip(poses, pixels):
            local = r_wc.T @ (point - p_wc)
            if local[2] < 0.05:
                return False
            u = self.src.camera.fu * local[0] / local[2] + self.src.camera.cu
            v = self.src.camera.fv * local[1] / local[2] + self.src.camera.cv
            if np.hypot(u - px[0], v - px[1]) > self.cfg.max_new_landmark_reproj_px:
                return False
        lm_id = self.next_lm_id
        self.next_lm_id += 1
        self.graph.landmarks[lm_id] = Landmark(lm_id, point)
        self.lm_true_id[lm_id] = true_id
        self.lm_ref_kf[lm_id] = rows[0][0]
        self.active_by_true[true_id] = lm_id
        for kf_id, px in rows:
            self.graph.keyframes[kf_id].observations.append(Observation(lm_id, px, info))
        return True

    def _refresh_active(self) -> None:
        ids = self.graph.ordered_ids()
        recent = ids[-self.cfg.reuse_window :]
        self.active_by_true = {}
        for kf_id in recent:
            for obs in self.graph.keyframes[kf_id].observations:
                true_id = self.lm_true_id.get(obs.landmark_id)
                if true_id is not None and obs.landmark_id in self.graph.landmarks:
                    self.active_by_true[true_id] = obs.landmark_id

    def _frame_observations(self, frame_idx: int) -> list[Observation]:
        ids, pixels = self.src.frame_obs[frame_idx]
        info = np.eye(2) / self.cfg.obs_sigma**2
        out = []
        for lid, px in zip(ids, pixels):
            map_id = self.active_by_true.get(int(lid))
            if map_id is not None and map_id in self.graph.landmarks:
                out.append(Observation(map_id, np.asarray(px, dtype=float), info))
        return out

    # --- keyframe insertion -----------------------------------------------------

    def _insert_keyframe(self, state: NavState, frame_idx: int, pre: PreintegratedImu) -> int:
        kf_id = self.next_kf_id
        self.next_kf_id += 1
        obs = self._frame_observations(frame_idx)
        self.graph.insert(Keyframe(kf_id, state, obs, pre))
        self.kf_insert_times.append(state.timestamp)

        ids, pixels = self.src.frame_obs[frame_idx]
        matched = {self.lm_true_id.get(o.landmark_id) for o in obs}
        for lid, px in zip(ids, pixels):
            true_id = int(lid)
            if true_id in matched:
                continue
            rows = self.pending.setdefault(true_id, [])
            rows.append((kf_id, np.asarray(px, dtype=float)))
            if len(rows) >= 2:
                if self._create_landmark(true_id, rows):
                    del self.pending[true_id]
                else:
                    self.pending[true_id] = rows[-1:]
        # expire pending sightings that fell out of the reuse window
        min_kf = kf_id - self.cfg.reuse_window
        for true_id in list(self.pending):
            rows = [r for r in self.pending[true_id] if r[0] >= min_kf]
            if rows:
                self.pending[true_id] = rows
            else:
                del self.pending[true_id]
        return kf_id

    # --- loop closing -----------------------------------------------------------

    def _own_keyframe_near(self, t: float, tol: float) -> int | None:
        ids = self.graph.ordered_ids()
        times = np.array([self.graph.keyframes[i].state.timestamp for i in ids])
        k = int(np.argmin(np.abs(times - t)))
        return ids[k] if abs(times[k] - t) <= tol else None

    def _close_loop(
        self,
        kf_a: int,
        kf_b: int,
        matched_true: np.ndarray,
        oracle_pts_a: np.ndarray,
        oracle_pts_b: np.ndarray,
    ) -> bool:
        graph = self.graph
        if oracle_pts_a.shape[0] < 5:
            return False
        # loop edge from the validated 3D-3D matches (Horn alignment)
        rel_ab = rigid_align_points(oracle_pts_a, oracle_pts_b)

        by_true_a: dict[int, int] = {}
        for o in graph.keyframes[kf_a].observations:
            t = self.lm_true_id.get(o.landmark_id)
            if t is not None:
                by_true_a[t] = o.landmark_id
        by_true_b: dict[int, int] = {}
        for o in graph.keyframes[kf_b].observations:
            t = self.lm_true_id.get(o.landmark_id)
            if t is not None:
                by_true_b[t] = o.landmark_id
        pairs = []
        for true_id in matched_true:
            la = by_true_a.get(int(true_id))
            lb = by_true_b.get(int(true_id))
            if la is not None and lb is not None:
                pairs.append((la, lb))

        # measured discrepancy between the edge and the current estimates
        from .manifold import log_so3

        t_a = _body_pose(graph.keyframes[kf_a].state)
        t_b = _body_pose(graph.keyframes[kf_b].state)
        current_rel = t_a.inverse().compose(t_b)
        disc = rel_ab.inverse().compose(current_rel)
        disc_rot = np.linalg.norm(log_so3(disc.rotation))
        disc_trans = np.linalg.norm(disc.translation)
        run_pgo = (
            disc_trans > self.cfg.pgo_min_translation
            or disc_rot > self.cfg.pgo_min_rotation
        )

        ids = graph.ordered_ids()
        poses = [_body_pose(graph.keyframes[i].state) for i in ids]
        index = {kf: k for k, kf in enumerate(ids)}
        edges = [
            PoseGraphEdge(
                k,
                k + 1,
                poses[k].inverse().compose(poses[k + 1]),
                np.eye(6) * self.cfg.seq_edge_info,
            )
            for k in range(len(ids) - 1)
        ]
        if run_pgo:
            self.loop_constraints.append((kf_a, kf_b, rel_ab))
            for la, lb, rel in self.loop_constraints:
                edges.append(
                    PoseGraphEdge(
                        index[la],
                        index[lb],
                        rel,
                        np.eye(6) * self.cfg.loop_edge_info,
                        is_loop=True,
                    )
                )
            corrected = pose_graph_optimize(poses, edges, anchor=0)

            old_rot = [p.rotation for p in poses]
            new_rot = [p.rotation for p in corrected]
            states = [graph.keyframes[i].state for i in ids]
            states = correct_velocities_after_loop(states, old_rot, new_rot)
            for i, state, pose in zip(ids, states, corrected):
                graph.keyframes[i].state = replace(
                    state, rotation=pose.rotation, position=pose.translation
                )
            # move landmarks with their reference keyframes
            for lm_id, lm in graph.landmarks.items():
                ref = self.lm_ref_kf.get(lm_id)
                if ref is None or ref not in index:
                    continue
                k = index[ref]
                t_old, t_new = poses[k], corrected[k]
                lm.position = t_new.apply(t_old.inverse().apply(lm.position))

        # merge duplicated landmarks into the originals
        merge = {lb: la for la, lb in pairs if la != lb}
        if merge:
            for kf in graph.keyframes.values():
                for o in kf.observations:
                    if o.landmark_id in merge:
                        o.landmark_id = merge[o.landmark_id]
            for lb, la in merge.items():
                graph.landmarks.pop(lb, None)
                true_id = self.lm_true_id.pop(lb, None)
                self.lm_ref_kf.pop(lb, None)
                if true_id is not None:
                    self.active_by_true[true_id] = la
        self.events.append(
            f"loop closed {kf_a}->{kf_b} with {len(pairs)} matches, {len(merge)} merges, "
            f"discrepancy {disc_trans:.3f} m / {disc_rot:.4f} rad, pgo={run_pgo}"
        )
        if run_pgo and self.cfg.full_ba_after_pgo_iters > 0:
            report = full_bundle_adjustment(graph, max_iters=self.cfg.full_ba_after_pgo_iters)
            self.events.append(
                f"post-loop full BA: {report.iterations} iters, cost "
                f"{report.initial_cost:.3e} -> {report.final_cost:.3e}"
            )
        return True

    # --- main loop ----------------------------------------------------------------

    def run(self) -> PipelineResult:
        cfg, src = self.cfg, self.src
        self._initialize()
        graph = self.graph

        loop_queue = sorted(src.loop_edges, key=lambda e: e[1])
        loop_cursor = 0
        gravity = self.init_result.gravity_w
        tracking_lost_at = None

        last_kf_id = graph.ordered_ids()[-1]
        prev_state = graph.keyframes[last_kf_id].state
        prior: MarginalPrior | None = None
        t_start = prev_state.timestamp
        start_idx = int(np.searchsorted(src.frame_times, t_start + 1e-9))

        for fi in range(start_idx, len(src.frame_times)):
            t = float(src.frame_times[fi])
            obs = self._frame_observations(fi)
            last_kf_state = graph.keyframes[last_kf_id].state
            try:
                if prior is None:
                    ms, dts = src.imu_segment(last_kf_state.timestamp, t)
                    pre = preintegrate(ms, dts, src.noise, bias_lin=last_kf_state.bias)
                    seed = predict(last_kf_state, pre, gravity)
                    state, hessian = optimize_frame_to_keyframe(
                        seed,
                        obs,
                        graph.landmarks,
                        last_kf_state,
                        pre,
                        gravity,
                        src.noise,
                        src.camera,
                        src.t_cb,
                        min_observations=cfg.min_track_observations,
                    )
                    prior = MarginalPrior(state, hessian)
                else:
                    ms, dts = src.imu_segment(prev_state.timestamp, t)
                    pre = preintegrate(ms, dts, src.noise, bias_lin=prev_state.bias)
                    seed = predict(prev_state, pre, gravity)
                    state, prior = optimize_frame_pair_with_prior(
                        prev_state,
                        prior,
                        seed,
                        obs,
                        graph.landmarks,
                        pre,
                        gravity,
                        src.noise,
                        src.camera,
                        src.t_cb,
                    )
            except TrackingLostError:
                tracking_lost_at = t
                self.events.append(f"tracking lost at t={t:.3f}")
                break

            ref_pose = _body_pose(graph.keyframes[last_kf_id].state)
            self.frame_log.append(
                (t, last_kf_id, ref_pose.inverse().compose(_body_pose(state)))
            )
            prev_state = state

            if cfg.mode != "localization" and t - graph.keyframes[last_kf_id].state.timestamp >= cfg.keyframe_interval - 1e-9:
                ms, dts = src.imu_segment(graph.keyframes[last_kf_id].state.timestamp, t)
                pre_kf = preintegrate(
                    ms, dts, src.noise, bias_lin=graph.keyframes[last_kf_id].state.bias
                )
                kf_id = self._insert_keyframe(state, fi, pre_kf)
                local_bundle_adjustment(graph, kf_id, max_iters=cfg.local_ba_iters)
                map_updated = True

                if cfg.mode == "slam":
                    # process matured edges: revisit landmarks need a few
                    # keyframes of refinement before the alignment is tight
                    while (
                        loop_cursor < len(loop_queue)
                        and loop_queue[loop_cursor][1] <= t - cfg.loop_delay + 1e-9
                    ):
                        t_a, t_b, ids, pts_a, pts_b = loop_queue[loop_cursor]
                        loop_cursor += 1
                        if t - self.last_loop_time < cfg.loop_min_interval:
                            continue
                        kf_a = self._own_keyframe_near(t_a, 0.5 * cfg.keyframe_interval)
                        kf_b = self._own_keyframe_near(t_b, 0.5 * cfg.keyframe_interval)
                        if kf_a is None or kf_b is None or kf_a == kf_b:
                            continue
                        if self._close_loop(kf_a, kf_b, ids, pts_a, pts_b):
                            self.last_loop_time = t
                else:
                    loop_cursor = len(loop_queue)

                self._refresh_active()
                last_kf_id = kf_id
                prev_state = graph.keyframes[kf_id].state
                prior = None  # map update invalidates the prior

        full_ba_report = None
        if cfg.final_full_ba and tracking_lost_at is None:
            full_ba_report = full_bundle_adjustment(graph)
            self.events.append(
                f"final full BA: {full_ba_report.iterations} iters, cost "
                f"{full_ba_report.initial_cost:.3e} -> {full_ba_report.final_cost:.3e}"
            )

        return PipelineResult(
            keyframe_poses=self.keyframe_trajectory(),
            frame_poses=self.frame_trajectory(),
            init_result=self.init_result,
            graph=graph,
            events=self.events,
            tracking_lost_at=tracking_lost_at,
            full_ba_report=full_ba_report,
        )

    def keyframe_trajectory(self) -> list[TimedPose]:
        out = []
        for kf_id in self.graph.ordered_ids():
            s = self.graph.keyframes[kf_id].state
            out.append(TimedPose(s.timestamp, s.rotation, s.position))
        return out

    def frame_trajectory(self) -> list[TimedPose]:
        """Frame poses recovered through their reference keyframes, so that
        keyframe corrections (loop closures, BA) propagate to frames."""
        out = []
        for t, ref_kf, rel in self.frame_log:
            if ref_kf in self.graph.keyframes:
                base = _body_pose(self.graph.keyframes[ref_kf].state)
                pose = base.compose(rel)
                out.append(TimedPose(t, pose.rotation, pose.translation))
        return out


def run_pipeline(source: SequenceSource, config: PipelineConfig | None = None) -> PipelineResult:
    config = config or PipelineConfig()
    if config.mode == "localization":
        # first pass builds and refines the map, second pass localizes in it
        build_cfg = replace(config, mode="slam", final_full_ba=True)
        build = SlamPipeline(source, build_cfg)
        build_result = build.run()
        localize = SlamPipeline(source, config)
        localize.graph = build_result.graph
        localize.init_result = build_result.init_result
        localize.lm_true_id = build.lm_true_id
        localize.lm_ref_kf = build.lm_ref_kf
        localize.next_lm_id = build.next_lm_id
        localize.next_kf_id = build.next_kf_id
        # the frozen map is fully trusted: every landmark stays matchable
        localize.active_by_true = {t: l for l, t in build.lm_true_id.items()}
        result = _run_localization_pass(localize)
        result.events = build_result.events + result.events
        return result
    return SlamPipeline(source, config).run()


def _run_localization_pass(pipe: SlamPipeline) -> PipelineResult:
    """Track every frame against the frozen map (no keyframes, no updates)."""
    src, cfg, graph = pipe.src, pipe.cfg, pipe.graph
    gravity = pipe.init_result.gravity_w
    ids = graph.ordered_ids()
    first_kf = graph.keyframes[ids[0]]
    prev_state = first_kf.state
    last_kf_id = ids[0]
    kf_times = np.array([graph.keyframes[i].state.timestamp for i in ids])
    prior: MarginalPrior | None = None
    tracking_lost_at = None
    start_idx = int(np.searchsorted(src.frame_times, prev_state.timestamp + 1e-9))

    for fi in range(start_idx, len(src.frame_times)):
        t = float(src.frame_times[fi])
        obs = pipe._frame_observations(fi)
        try:
            ms, dts = src.imu_segment(prev_state.timestamp, t)
            pre = preintegrate(ms, dts, src.noise, bias_lin=prev_state.bias)
            seed = predict(prev_state, pre, gravity)
            if prior is None:
                state, hessian = optimize_frame_to_keyframe(
                    seed,
                    obs,
                    graph.landmarks,
                    prev_state,
                    pre,
                    gravity,
                    src.noise,
                    src.camera,
                    src.t_cb,
                    min_observations=cfg.min_track_observations,
                )
                prior = MarginalPrior(state, hessian)
            else:
                state, prior = optimize_frame_pair_with_prior(
                    prev_state,
                    prior,
                    seed,
                    obs,
                    graph.landmarks,
                    pre,
                    gravity,
                    src.noise,
                    src.camera,
                    src.t_cb,
                )
        except TrackingLostError:
            tracking_lost_at = t
            pipe.events.append(f"tracking lost at t={t:.3f}")
            break
        # reference keyframe = nearest map keyframe in time
        near = int(np.argmin(np.abs(kf_times - t)))
        last_kf_id = ids[near]
        ref_pose = _body_pose(graph.keyframes[last_kf_id].state)
        pipe.frame_log.append((t, last_kf_id, ref_pose.inverse().compose(_body_pose(state))))
        prev_state = state

    return PipelineResult(
        keyframe_poses=pipe.keyframe_trajectory(),
        frame_poses=pipe.frame_trajectory(),
        init_result=pipe.init_result,
        graph=graph,
        events=pipe.events,
        tracking_lost_at=tracking_lost_at,
    )
