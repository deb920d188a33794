import numpy as np
import pytest

from vislam.errors import InvalidModelError
from vislam.manifold import exp_so3
from vislam.preintegration import ImuBias, NavState, predict, preintegrate
from vislam.simulator import SimConfig, TrajectoryModel, generate, replay

from conftest import circle_model, excited_model


class TestGenerate:
    def test_hover_statics(self):
        model = TrajectoryModel(kind="hover", duration=2.0, start=np.array([1.0, 2.0, 3.0]))
        cfg = SimConfig(imu_noise_scale=0.0, pixel_noise=0.0, landmark_count=20, seed=0)
        data = generate(model, cfg)
        gravity = data.ground_truth.gravity
        r0 = data.ground_truth.rotations[0]
        expected = -r0.T @ gravity
        assert np.allclose(data.imu_omega, 0.0, atol=1e-15)
        assert np.allclose(data.imu_accel, expected, atol=1e-12)

    def test_circle_centripetal_magnitude(self):
        model = TrajectoryModel(kind="circle", duration=4.0, radius=2.0, angular_rate=0.5)
        cfg = SimConfig(imu_noise_scale=0.0, pixel_noise=0.0, landmark_count=20, seed=0)
        data = generate(model, cfg)
        gravity = data.ground_truth.gravity
        rotations = data.ground_truth.rotations[:-1]
        accel_w = np.einsum("nij,nj->ni", rotations, data.imu_accel) + gravity
        mags = np.linalg.norm(accel_w, axis=1)
        # a = omega^2 r = 0.5 m/s^2 up to discretization
        assert np.allclose(mags, 0.5, atol=1e-4)

    def test_reintegration_reproduces_truth_over_60s(self):
        model = excited_model(duration=60.0)
        cfg = SimConfig(imu_noise_scale=0.0, pixel_noise=0.0, landmark_count=20, seed=2)
        data = generate(model, cfg)
        gt = data.ground_truth
        state = NavState(gt.rotations[0], gt.positions[0], gt.velocities[0], ImuBias(), 0.0)
        ms, dts = data.imu_segment(0.0, 60.0)
        step = int(round(1.0 / data.imu_dt))
        worst = 0.0
        for k in range(0, len(ms), step):
            pre = preintegrate(ms[k : k + step], dts[k : k + step], cfg.noise)
            state = predict(state, pre, gt.gravity)
            idx = min(k + step, gt.times.shape[0] - 1)
            worst = max(worst, np.linalg.norm(state.position - gt.positions[idx]))
        assert worst < 1e-4

    def test_specific_force_bound(self):
        model = TrajectoryModel(kind="circle", duration=2.0, radius=2.0, angular_rate=4.6)
        cfg = SimConfig(imu_noise_scale=0.0, pixel_noise=0.0, landmark_count=10, seed=0)
        with pytest.raises(InvalidModelError):
            generate(model, cfg)

    def test_seeded_determinism(self):
        model = circle_model(duration=3.0)
        cfg = SimConfig(landmark_count=50, seed=9)
        a = generate(model, cfg)
        b = generate(model, cfg)
        assert np.array_equal(a.imu_omega, b.imu_omega)
        assert np.array_equal(a.imu_accel, b.imu_accel)
        assert np.array_equal(a.ground_truth.landmarks, b.ground_truth.landmarks)
        for fa, fb in zip(a.frames, b.frames):
            assert np.array_equal(fa.pixels, fb.pixels)
            assert np.array_equal(fa.landmark_ids, fb.landmark_ids)

    def test_observations_reproject_within_noise(self):
        model = circle_model(duration=3.0)
        cfg = SimConfig(landmark_count=150, seed=4, pixel_noise=1.0, imu_noise_scale=0.0)
        data = generate(model, cfg)
        gt = data.ground_truth
        cam = data.camera
        r_cb, p_cb = data.t_cb.rotation, data.t_cb.translation
        stride = int(round(cfg.imu_rate / cfg.cam_rate))
        for fi, frame in enumerate(data.frames):
            if frame.landmark_ids.size == 0:
                continue
            r_wb = gt.rotations[fi * stride]
            p_wb = gt.positions[fi * stride]
            r_wc = r_wb @ r_cb.T
            p_wc = p_wb - r_wc @ p_cb
            pts = (gt.landmarks[frame.landmark_ids] - p_wc) @ r_wc
            u = cam.fu * pts[:, 0] / pts[:, 2] + cam.cu
            v = cam.fv * pts[:, 1] / pts[:, 2] + cam.cv
            err = np.hypot(frame.pixels[:, 0] - u, frame.pixels[:, 1] - v)
            assert np.all(err < 3.0 * np.hypot(cfg.pixel_noise, cfg.pixel_noise))

    def test_landmarks_outside_inner_shell(self):
        model = circle_model(duration=3.0)
        cfg = SimConfig(landmark_count=80, seed=5)
        data = generate(model, cfg)
        pos = data.ground_truth.positions
        lo = pos.min(axis=0) - cfg.landmark_inner_margin
        hi = pos.max(axis=0) + cfg.landmark_inner_margin
        inside = np.all(
            (data.ground_truth.landmarks > lo) & (data.ground_truth.landmarks < hi), axis=1
        )
        assert not inside.any()

    def test_visual_scale_applied(self):
        model = circle_model(duration=3.0)
        cfg = SimConfig(landmark_count=30, seed=6, scale_true=2.5, imu_noise_scale=0.0,
                        pixel_noise=0.0)
        data = generate(model, cfg)
        gt = data.ground_truth
        r_cb, p_cb = data.t_cb.rotation, data.t_cb.translation
        stride = int(round(cfg.imu_rate / cfg.cam_rate))
        k = 10
        idx = data.keyframe_frame_indices[k] * stride
        p_wc_true = gt.positions[idx] - (gt.rotations[idx] @ r_cb.T) @ p_cb
        assert np.allclose(data.keyframe_positions_vis[k] * 2.5, p_wc_true, atol=1e-12)


class TestReplay:
    def test_event_counts_and_interleave(self):
        model = TrajectoryModel(kind="hover", duration=1.0)
        cfg = SimConfig(imu_noise_scale=0.0, pixel_noise=0.0, landmark_count=10, seed=0)
        data = generate(model, cfg)
        events = list(replay(data))
        kinds = [k for k, _ in events]
        assert len(events) == 220
        assert kinds.count("imu") == 200
        assert kinds.count("camera") == 20
        # ties broken IMU-first: each camera event follows the IMU event
        # holding the same timestamp
        for k, (kind, payload) in enumerate(events):
            if kind == "camera":
                prev_kind, prev_payload = events[k - 1]
                assert prev_kind == "imu"
                assert prev_payload.timestamp == payload.timestamp

    def test_timestamps_sorted(self):
        model = circle_model(duration=2.0)
        cfg = SimConfig(landmark_count=20, seed=1)
        data = generate(model, cfg)
        times = [
            (p.timestamp if k == "imu" else p.timestamp) for k, p in replay(data)
        ]
        assert all(t0 <= t1 for t0, t1 in zip(times, times[1:]))

    def test_count_formula(self):
        for duration in (0.5, 2.0):
            model = TrajectoryModel(kind="hover", duration=duration)
            cfg = SimConfig(imu_noise_scale=0.0, landmark_count=5, seed=0)
            data = generate(model, cfg)
            expected = int(round(cfg.imu_rate * duration)) + int(round(cfg.cam_rate * duration))
            assert len(list(replay(data))) == expected


class TestLoopOracle:
    def test_revisit_emits_exact_matched_points(self):
        model = circle_model(duration=16.0)
        cfg = SimConfig(landmark_count=300, seed=3, imu_noise_scale=0.0, pixel_noise=0.0)
        data = generate(model, cfg)
        assert len(data.loop_edges) > 0
        gt = data.ground_truth
        edge = data.loop_edges[0]
        ka = int(round(edge.timestamp_a / data.imu_dt))
        kb = int(round(edge.timestamp_b / data.imu_dt))
        world_a = edge.points_a @ gt.rotations[ka].T + gt.positions[ka]
        world_b = edge.points_b @ gt.rotations[kb].T + gt.positions[kb]
        assert np.allclose(world_a, gt.landmarks[edge.landmark_ids], atol=1e-9)
        assert np.allclose(world_b, gt.landmarks[edge.landmark_ids], atol=1e-9)

    def test_no_loops_without_revisit(self):
        model = TrajectoryModel(kind="line", duration=10.0,
                                velocity=np.array([0.8, 0.0, 0.0]))
        cfg = SimConfig(landmark_count=50, seed=3)
        data = generate(model, cfg)
        assert data.loop_edges == []
