import numpy as np
import pytest

from vislam.errors import DegenerateMotionError, InsufficientDataError
from vislam.initializer import (
    CONDITION_NUMBER_THRESHOLD,
    InitializationInput,
    KeyframeVisualPose,
    build_refinement_system,
    build_scale_gravity_system,
    estimate_gyro_bias,
    estimate_velocities,
    gravity_alignment_rotation,
    parse_result,
    refine_with_accel_bias,
    reinitialize_biases,
    run_full_initialization,
    serialize_result,
    solve_scale_gravity,
)
from vislam.manifold import exp_so3
from vislam.preintegration import ImuBias
from vislam.simulator import SimConfig, TrajectoryModel, generate, initialization_input

from conftest import DEFAULT_BIAS, circle_model, excited_model

GRAVITY = np.array([0.0, 0.0, -9.81])


def sim(duration=16.0, noise_scale=0.0, pixel=0.0, scale=2.3, bias=None, seed=7,
        kf_stride=1, model=None, walk=False, visual_noise=0.0):
    cfg = SimConfig(
        imu_noise_scale=noise_scale,
        pixel_noise=pixel,
        landmark_count=40,
        seed=seed,
        scale_true=scale,
        bias=bias or ImuBias(),
        kf_stride=kf_stride,
        bias_walk=walk,
        visual_noise=visual_noise,
    )
    return generate(model or excited_model(duration), cfg)


class TestGyroBias:
    def test_recovers_injected_bias_noise_free(self):
        data = sim(bias=ImuBias(np.array([0.02, -0.01, 0.03]), np.zeros(3)))
        inp = initialization_input(data, max_keyframes=60)
        bias = estimate_gyro_bias(inp)
        assert np.allclose(bias, [0.02, -0.01, 0.03], atol=1e-4)

    def test_zero_bias_gives_zero(self):
        data = sim()
        inp = initialization_input(data, max_keyframes=40)
        assert np.linalg.norm(estimate_gyro_bias(inp)) < 1e-8

    def test_realistic_noise_within_tolerance(self):
        data = sim(duration=15.0, noise_scale=1.0, bias=DEFAULT_BIAS, seed=21)
        inp = initialization_input(data)
        bias = estimate_gyro_bias(inp)
        assert np.linalg.norm(bias - DEFAULT_BIAS.gyro) < 5e-3

    def test_needs_two_keyframes(self):
        data = sim()
        with pytest.raises(InsufficientDataError):
            estimate_gyro_bias(initialization_input(data, max_keyframes=1))


class TestScaleGravity:
    def test_noise_free_recovery(self):
        data = sim(scale=2.3)  # zero accelerometer bias: the stage-2 model is exact
        inp = initialization_input(data, max_keyframes=60)
        s, g, cond = solve_scale_gravity(inp)
        assert abs(s / 2.3 - 1.0) < 1e-6
        assert np.allclose(g, GRAVITY, atol=1e-6)
        assert cond < CONDITION_NUMBER_THRESHOLD

    def test_metric_input_gives_unit_scale(self):
        data = sim(scale=1.0)
        inp = initialization_input(data, max_keyframes=60)
        s, _, _ = solve_scale_gravity(inp)
        assert abs(s - 1.0) < 1e-6

    def test_constant_velocity_is_ill_conditioned(self):
        # vision estimation noise keeps the system solvable but near-singular
        model = TrajectoryModel(kind="line", duration=15.0,
                                velocity=np.array([0.6, 0.1, 0.0]))
        data = sim(noise_scale=1.0, model=model, seed=5, visual_noise=2e-4)
        inp = initialization_input(data)
        _, _, cond = solve_scale_gravity(inp)
        assert cond > CONDITION_NUMBER_THRESHOLD

    def test_constant_velocity_noise_free_is_degenerate(self):
        model = TrajectoryModel(kind="line", duration=10.0,
                                velocity=np.array([0.6, 0.1, 0.0]))
        data = sim(model=model)
        with pytest.raises(DegenerateMotionError):
            solve_scale_gravity(initialization_input(data))

    def test_needs_four_keyframes(self):
        data = sim()
        with pytest.raises(InsufficientDataError):
            solve_scale_gravity(initialization_input(data, max_keyframes=3))

    def test_system_shape(self):
        data = sim()
        for n in (4, 7, 12):
            inp = initialization_input(data, max_keyframes=n)
            a, b = build_scale_gravity_system(inp)
            assert a.shape == (3 * (n - 2), 4)
            assert b.shape == (3 * (n - 2),)


class TestAccelBiasRefinement:
    def test_recovers_injected_accel_bias(self):
        bias = ImuBias(np.zeros(3), np.array([0.05, 0.1, -0.05]))
        data = sim(bias=bias)
        inp = initialization_input(data)
        _, g_approx, _ = solve_scale_gravity(inp)
        s, g, ba, cond = refine_with_accel_bias(inp, g_approx)
        assert np.allclose(ba, bias.accel, atol=1e-4)
        assert abs(s / 2.3 - 1.0) < 1e-6
        assert np.linalg.norm(g) == pytest.approx(9.81, abs=1e-12)

    def test_zero_bias_stays_zero(self):
        data = sim()
        inp = initialization_input(data)
        _, g_approx, _ = solve_scale_gravity(inp)
        _, g, ba, _ = refine_with_accel_bias(inp, g_approx)
        assert np.linalg.norm(ba) < 1e-8
        # tilt correction is negligible when the seed direction is right
        cos = g @ g_approx / (np.linalg.norm(g) * np.linalg.norm(g_approx))
        assert np.arccos(np.clip(cos, -1, 1)) < 1e-7

    def test_realistic_noise_scale_error_below_one_percent(self):
        data = sim(duration=15.0, noise_scale=1.0, pixel=0.0, bias=DEFAULT_BIAS, seed=23)
        inp = initialization_input(data)
        bg = estimate_gyro_bias(inp)
        _, g_approx, _ = solve_scale_gravity(inp, bg)
        s, _, _, _ = refine_with_accel_bias(inp, g_approx, bg)
        assert abs(s / 2.3 - 1.0) < 0.01

    def test_system_shape(self):
        data = sim()
        for n in (4, 9):
            inp = initialization_input(data, max_keyframes=n)
            a, b, _ = build_refinement_system(inp, GRAVITY)
            assert a.shape == (3 * (n - 2), 6)

    def test_gravity_alignment_edge_cases(self):
        assert np.allclose(gravity_alignment_rotation(GRAVITY), np.eye(3), atol=1e-12)
        r = gravity_alignment_rotation(np.array([0.0, 0.0, 9.81]))
        assert np.allclose(r @ np.array([0, 0, -1.0]), [0, 0, 1.0], atol=1e-12)


class TestVelocities:
    def test_hover_velocities_are_zero(self):
        model = TrajectoryModel(kind="hover", duration=8.0, start=np.array([0.5, 0, 1.0]))
        data = sim(model=model, scale=1.0)
        inp = initialization_input(data)
        vel = estimate_velocities(inp, 1.0, GRAVITY, np.zeros(3), np.zeros(3))
        assert np.abs(vel).max() < 1e-8

    def test_circle_matches_analytic_tangential_speed(self):
        model = circle_model(duration=10.0, radius=2.0, rate=0.5)
        model.wobble_amplitude = np.zeros(3)
        data = sim(model=model, scale=1.0)
        inp = initialization_input(data)
        vel = estimate_velocities(inp, 1.0, GRAVITY, np.zeros(3), np.zeros(3))
        speeds = np.linalg.norm(vel, axis=1)
        assert np.allclose(speeds, 2.0 * 0.5, atol=1e-6)

    def test_noisy_rms_error(self):
        data = sim(duration=15.0, noise_scale=1.0, bias=DEFAULT_BIAS, seed=29)
        inp = initialization_input(data)
        result = run_full_initialization(inp)
        stride = int(round(data.config.imu_rate / data.config.cam_rate)) * data.config.kf_stride
        truth = data.ground_truth.velocities[::stride][: len(result.velocities)]
        rms = np.sqrt(np.mean(np.sum((result.velocities - truth) ** 2, axis=1)))
        assert rms < 0.05


class TestFullInitialization:
    def test_noise_free_recovers_everything(self, biased_sim):
        inp = initialization_input(biased_sim)
        result = run_full_initialization(inp)
        assert abs(result.scale / 2.3 - 1.0) < 1e-4
        assert np.allclose(result.gyro_bias, DEFAULT_BIAS.gyro, atol=1e-4)
        assert np.allclose(result.accel_bias, DEFAULT_BIAS.accel, atol=1e-4)
        assert np.allclose(result.gravity_w, GRAVITY, atol=1e-4)
        stride = int(round(biased_sim.config.imu_rate / biased_sim.config.cam_rate))
        truth = biased_sim.ground_truth.velocities[::stride][: len(result.velocities)]
        assert np.abs(result.velocities - truth).max() < 1e-4

    def test_metric_zero_bias_input(self, clean_sim):
        inp = initialization_input(clean_sim, max_keyframes=40)
        result = run_full_initialization(inp)
        assert abs(result.scale - 1.0) < 1e-6
        assert np.linalg.norm(result.gyro_bias) < 1e-8
        assert np.linalg.norm(result.accel_bias) < 1e-6
        assert np.allclose(result.gravity_w, GRAVITY, atol=1e-6)

    def test_gravity_norm_is_exact(self, noisy_sim):
        result = run_full_initialization(initialization_input(noisy_sim))
        assert np.linalg.norm(result.gravity_w) == pytest.approx(9.81, abs=1e-9)

    def test_yaw_gauge_invariance(self, biased_sim):
        inp = initialization_input(biased_sim, max_keyframes=30)
        base = run_full_initialization(inp)
        yaw = exp_so3(np.array([0.0, 0.0, 0.8]))  # rotation about true gravity
        rotated = InitializationInput(
            [
                KeyframeVisualPose(k.id, k.timestamp, yaw @ k.r_wc, yaw @ k.p_wc)
                for k in inp.keyframes
            ],
            inp.preintegrations,
            inp.t_cb,
            inp.gravity_magnitude,
        )
        out = run_full_initialization(rotated)
        assert abs(out.scale - base.scale) < 1e-9
        assert np.allclose(out.gyro_bias, base.gyro_bias, atol=1e-9)
        assert np.allclose(out.accel_bias, base.accel_bias, atol=1e-9)
        assert np.allclose(out.gravity_w, yaw @ base.gravity_w, atol=1e-9)

    def test_scale_error_improves_with_window(self):
        errors_small, errors_large = [], []
        for seed in range(20):
            data = sim(duration=16.0, noise_scale=1.0, bias=DEFAULT_BIAS, seed=100 + seed,
                       kf_stride=5)
            for n, sink in ((8, errors_small), (40, errors_large)):
                inp = initialization_input(data, max_keyframes=n)
                try:
                    result = run_full_initialization(inp)
                    sink.append(abs(result.scale / 2.3 - 1.0))
                except DegenerateMotionError:
                    sink.append(np.inf)
        assert np.median(errors_large) <= np.median(errors_small)

    def test_velocity_elimination_equivalence_stage2(self, biased_sim):
        """Triplet-eliminated solution equals the expanded system that keeps
        all velocities as unknowns (noise-free)."""
        data = sim(scale=2.3)  # zero bias so the stage-2 model is exact
        for n in (4, 6, 8):
            inp = initialization_input(data, max_keyframes=n)
            s_trip, g_trip, _ = solve_scale_gravity(inp)
            s_full, g_full = _expanded_scale_gravity(inp)
            assert abs(s_trip - s_full) < 1e-8
            assert np.allclose(g_trip, g_full, atol=1e-8)

    def test_serialization_round_trip(self, noisy_sim):
        result = run_full_initialization(initialization_input(noisy_sim))
        text = serialize_result(result)
        back = parse_result(text)
        assert back.scale == result.scale
        assert np.array_equal(back.gravity_w, result.gravity_w)
        assert np.array_equal(back.velocities, result.velocities)
        assert back.condition_number_stage3 == result.condition_number_stage3


def _expanded_scale_gravity(inp):
    """Oracle: solve scale and gravity keeping every velocity as an unknown.

    Unknowns x = [s, g(3), v_0..v_{N-1}]; equations are the N-1 position
    relations and N-1 velocity relations between consecutive keyframes.
    """
    kfs = inp.keyframes
    n = len(kfs)
    r_wb = inp.body_rotations()
    p_cb = inp.t_cb.translation
    pres = inp.preintegrations
    rows = 6 * (n - 1)
    cols = 4 + 3 * n
    a = np.zeros((rows, cols))
    b = np.zeros(rows)
    for i in range(n - 1):
        dt = kfs[i + 1].timestamp - kfs[i].timestamp
        r = slice(6 * i, 6 * i + 3)
        # s (p2 - p1) - v_i dt - 0.5 g dt^2 = R_B dp + (Rc1 - Rc2) p_cb
        a[r, 0] = kfs[i + 1].p_wc - kfs[i].p_wc
        a[r, 1:4] = -0.5 * dt * dt * np.eye(3)
        a[r, 4 + 3 * i : 7 + 3 * i] = -dt * np.eye(3)
        b[r] = r_wb[i] @ pres[i].delta_p + (kfs[i].r_wc - kfs[i + 1].r_wc) @ p_cb
        # v_{i+1} - v_i - g dt = R_B dv
        r = slice(6 * i + 3, 6 * i + 6)
        a[r, 1:4] = -dt * np.eye(3)
        a[r, 4 + 3 * i : 7 + 3 * i] = -np.eye(3)
        a[r, 7 + 3 * i : 10 + 3 * i] = np.eye(3)
        b[r] = r_wb[i] @ pres[i].delta_v
    x, *_ = np.linalg.lstsq(a, b, rcond=None)
    return float(x[0]), x[1:4]


class TestReinitializeBiases:
    def _frames_and_pres(self, data, count=20):
        inp = initialization_input(data, max_keyframes=count)
        return inp.keyframes, inp.preintegrations

    def test_noise_free_recovery(self):
        data = sim(bias=DEFAULT_BIAS, scale=1.0, kf_stride=1)
        frames, pres = self._frames_and_pres(data)
        bias = reinitialize_biases(frames, pres, 1.0, GRAVITY, data.t_cb)
        assert np.allclose(bias.gyro, DEFAULT_BIAS.gyro, atol=1e-4)
        assert np.allclose(bias.accel, DEFAULT_BIAS.accel, atol=1e-4)

    def test_zero_bias(self):
        data = sim(scale=1.0, kf_stride=2)
        frames, pres = self._frames_and_pres(data)
        bias = reinitialize_biases(frames, pres, 1.0, GRAVITY, data.t_cb)
        assert np.linalg.norm(bias.gyro) < 1e-8
        assert np.linalg.norm(bias.accel) < 1e-6

    def test_requires_exact_frame_count(self):
        data = sim(scale=1.0, kf_stride=2)
        frames, pres = self._frames_and_pres(data, count=15)
        with pytest.raises(InsufficientDataError):
            reinitialize_biases(frames, pres, 1.0, GRAVITY, data.t_cb)

    def test_walked_bias_within_spread(self):
        data = sim(scale=1.0, kf_stride=2, noise_scale=1.0, bias=DEFAULT_BIAS,
                   walk=True, seed=31)
        # spread reference uses the same 0.1 s keyframe spacing
        frames, pres = self._frames_and_pres(data)
        bias = reinitialize_biases(frames, pres, 1.0, GRAVITY, data.t_cb)
        noise = data.config.noise
        span = frames[-1].timestamp - frames[0].timestamp
        stride = int(round(data.config.imu_rate / data.config.cam_rate)) * 2
        true_gyro = data.ground_truth.gyro_bias[: 20 * stride].mean(axis=0)
        true_accel = data.ground_truth.accel_bias[: 20 * stride].mean(axis=0)
        # recovered bias within 3 sigma of the walk spread plus solver noise
        sigma_g = max(noise.gyro_walk * np.sqrt(span), 2e-3)
        sigma_a = max(noise.accel_walk * np.sqrt(span), 2e-2)
        assert np.all(np.abs(bias.gyro - true_gyro) < 3 * sigma_g)
        assert np.all(np.abs(bias.accel - true_accel) < 3 * sigma_a)


class TestInputValidation:
    def test_mismatched_preintegration_count(self, clean_sim):
        inp = initialization_input(clean_sim, max_keyframes=10)
        with pytest.raises(ValueError):
            InitializationInput(inp.keyframes, inp.preintegrations[:-1], inp.t_cb)

    def test_span_mismatch_detected(self, clean_sim):
        inp = initialization_input(clean_sim, max_keyframes=10)
        bad = list(inp.preintegrations)
        bad[3], bad[4] = bad[4], bad[3]  # still right count, wrong spans
        from dataclasses import replace

        bad[3] = replace(bad[3], dt_total=bad[3].dt_total + 0.01)
        with pytest.raises(ValueError):
            InitializationInput(inp.keyframes, bad, inp.t_cb)
