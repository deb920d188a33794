import numpy as np
import pytest

from vislam.manifold import exp_so3, log_so3
from vislam.preintegration import (
    ImuBias,
    ImuMeasurement,
    ImuNoiseModel,
    NavState,
    PreintegratedImu,
    correct_bias_first_order,
    euroc_noise_model,
    integrate_measurement,
    predict,
    preintegrate,
)

NOISE = euroc_noise_model()


def brute_force_kinematics(omegas, accels, dts, r0, v0, p0, gravity, bias=None):
    """Direct zero-order-hold state propagation, the independent oracle."""
    bias = bias or ImuBias()
    r, v, p = r0.copy(), v0.copy(), p0.copy()
    for w, a, dt in zip(omegas, accels, dts):
        w = w - bias.gyro
        a = a - bias.accel
        p = p + v * dt + 0.5 * gravity * dt * dt + 0.5 * r @ a * dt * dt
        v = v + gravity * dt + r @ a * dt
        r = r @ exp_so3(w * dt)
    return r, v, p


def random_stream(rng, n, dt):
    omegas = 0.6 * rng.normal(size=(n, 3))
    accels = 3.0 * rng.normal(size=(n, 3)) + [0, 0, 9.81]
    ms = [ImuMeasurement(k * dt, w, a) for k, (w, a) in enumerate(zip(omegas, accels))]
    return ms, np.full(n, dt)


class TestIntegrateMeasurement:
    def test_zero_step(self):
        pre = integrate_measurement(
            PreintegratedImu(), ImuMeasurement(0.0, np.zeros(3), np.zeros(3)), 0.005, NOISE
        )
        assert np.array_equal(pre.delta_r, np.eye(3))
        assert np.array_equal(pre.delta_v, np.zeros(3))
        assert np.array_equal(pre.delta_p, np.zeros(3))

    def test_constant_acceleration_one_second(self):
        pre = PreintegratedImu()
        for k in range(200):
            m = ImuMeasurement(k * 0.005, np.zeros(3), np.array([1.0, 0, 0]))
            pre = integrate_measurement(pre, m, 0.005, NOISE)
        assert np.allclose(pre.delta_v, [1.0, 0, 0], atol=1e-12)
        assert np.allclose(pre.delta_p, [0.5, 0, 0], atol=1e-12)
        assert pre.dt_total == pytest.approx(1.0)

    def test_rotating_accelerating_matches_oracle(self):
        omega = np.array([0.0, 0.0, 0.5])
        accel = np.array([0.2, 0.0, 9.6])
        dts = np.full(400, 0.005)
        ms = [ImuMeasurement(k * 0.005, omega, accel) for k in range(400)]
        pre = preintegrate(ms, dts, NOISE)
        r, v, p = brute_force_kinematics(
            [omega] * 400, [accel] * 400, dts, np.eye(3), np.zeros(3), np.zeros(3), np.zeros(3)
        )
        assert np.allclose(pre.delta_r, r, atol=1e-12)
        assert np.allclose(pre.delta_v, v, atol=1e-12)
        assert np.allclose(pre.delta_p, p, atol=1e-12)

    def test_rejects_bad_dt(self):
        m = ImuMeasurement(0.0, np.zeros(3), np.zeros(3))
        with pytest.raises(ValueError):
            integrate_measurement(PreintegratedImu(), m, 0.0, NOISE)

    def test_rejects_non_finite(self):
        m = ImuMeasurement(0.0, np.array([np.inf, 0, 0]), np.zeros(3))
        with pytest.raises(ValueError):
            integrate_measurement(PreintegratedImu(), m, 0.005, NOISE)

    def test_fresh_state_is_zero(self):
        pre = PreintegratedImu()
        assert np.array_equal(pre.delta_r, np.eye(3))
        assert np.array_equal(pre.covariance, np.zeros((9, 9)))
        assert np.array_equal(pre.dr_dbg, np.zeros((3, 3)))
        assert pre.dt_total == 0.0

    def test_covariance_trace_grows(self):
        rng = np.random.default_rng(2)
        ms, dts = random_stream(rng, 100, 0.005)
        pre = PreintegratedImu()
        last = 0.0
        for m, dt in zip(ms, dts):
            pre = integrate_measurement(pre, m, dt, NOISE)
            trace = np.trace(pre.covariance)
            assert trace >= last
            last = trace

    def test_covariance_psd(self):
        rng = np.random.default_rng(3)
        ms, dts = random_stream(rng, 200, 0.005)
        pre = preintegrate(ms, dts, NOISE)
        eigs = np.linalg.eigvalsh(pre.covariance)
        assert eigs.min() >= -1e-12


class TestPredict:
    def test_identity_preintegration_keeps_state(self):
        pre = PreintegratedImu()
        for k in range(10):
            pre = integrate_measurement(
                pre, ImuMeasurement(k * 0.01, np.zeros(3), np.zeros(3)), 0.01, NOISE
            )
        state = NavState(np.eye(3), np.zeros(3), np.zeros(3), ImuBias(), 0.0)
        out = predict(state, pre, np.zeros(3))
        assert np.allclose(out.position, 0.0, atol=1e-15)
        assert np.allclose(out.velocity, 0.0, atol=1e-15)
        assert np.array_equal(out.rotation, np.eye(3))

    def test_gravity_cancellation_when_stationary(self):
        rng = np.random.default_rng(4)
        r0 = exp_so3(rng.normal(size=3))
        gravity = np.array([0, 0, -9.81])
        pre = PreintegratedImu()
        for k in range(200):
            m = ImuMeasurement(k * 0.005, np.zeros(3), -r0.T @ gravity)
            pre = integrate_measurement(pre, m, 0.005, NOISE)
        state = NavState(r0, np.zeros(3), np.zeros(3), ImuBias(), 0.0)
        out = predict(state, pre, gravity)
        assert np.linalg.norm(out.velocity) < 1e-10
        assert np.linalg.norm(out.position) < 1e-10

    def test_random_segment_matches_fine_oracle(self):
        rng = np.random.default_rng(5)
        n, dt = 1000, 0.001  # 1 kHz over one second
        ms, dts = random_stream(rng, n, dt)
        gravity = np.array([0, 0, -9.81])
        r0 = exp_so3(rng.normal(size=3))
        v0 = rng.normal(size=3)
        p0 = rng.normal(size=3)
        pre = preintegrate(ms, dts, NOISE)
        state = predict(NavState(r0, p0, v0, ImuBias(), 0.0), pre, gravity)
        r, v, p = brute_force_kinematics(
            [m.omega for m in ms], [m.accel for m in ms], dts, r0, v0, p0, gravity
        )
        assert np.linalg.norm(state.position - p) < 1e-6
        assert np.linalg.norm(state.velocity - v) < 1e-9
        assert np.linalg.norm(log_so3(state.rotation.T @ r)) < 1e-12

    def test_rejects_empty_span(self):
        state = NavState(np.eye(3), np.zeros(3), np.zeros(3), ImuBias(), 0.0)
        with pytest.raises(ValueError):
            predict(state, PreintegratedImu(), np.zeros(3))


class TestBiasCorrection:
    def setup_method(self):
        rng = np.random.default_rng(6)
        # a keyframe-gap-sized span: consecutive keyframes sit at most 0.5 s
        # apart, which bounds the second-order correction truncation
        omegas = 0.4 * rng.normal(size=(100, 3))
        accels = 1.2 * rng.normal(size=(100, 3)) + [0, 0, 9.81]
        self.ms = [
            ImuMeasurement(k * 0.005, w, a) for k, (w, a) in enumerate(zip(omegas, accels))
        ]
        self.dts = np.full(100, 0.005)
        self.base = ImuBias(np.array([0.01, -0.02, 0.015]), np.array([0.03, 0.0, -0.02]))
        self.pre = preintegrate(self.ms, self.dts, NOISE, bias_lin=self.base)

    def test_zero_delta_is_identity(self):
        r, v, p = correct_bias_first_order(self.pre, self.base)
        assert np.array_equal(r, self.pre.delta_r)
        assert np.array_equal(v, self.pre.delta_v)
        assert np.array_equal(p, self.pre.delta_p)

    def test_small_gyro_delta_matches_reintegration(self):
        new = ImuBias(self.base.gyro + [1e-4, 0, 0], self.base.accel)
        r, v, p = correct_bias_first_order(self.pre, new)
        ref = preintegrate(self.ms, self.dts, NOISE, bias_lin=new)
        assert np.linalg.norm(log_so3(r.T @ ref.delta_r)) < 1e-8
        assert np.linalg.norm(v - ref.delta_v) < 1e-8
        assert np.linalg.norm(p - ref.delta_p) < 1e-8

    def test_linearity_in_velocity_and_position(self):
        db = np.array([2e-4, -1e-4, 3e-4])
        one = ImuBias(self.base.gyro + db, self.base.accel + db)
        two = ImuBias(self.base.gyro + 2 * db, self.base.accel + 2 * db)
        _, v1, p1 = correct_bias_first_order(self.pre, one)
        _, v2, p2 = correct_bias_first_order(self.pre, two)
        assert np.allclose(v2 - self.pre.delta_v, 2 * (v1 - self.pre.delta_v), atol=1e-15)
        assert np.allclose(p2 - self.pre.delta_p, 2 * (p1 - self.pre.delta_p), atol=1e-15)


class TestBiasJacobians:
    def test_all_five_match_central_differences(self):
        rng = np.random.default_rng(7)
        h = 1e-6
        for _ in range(5):
            ms, dts = random_stream(rng, 200, 0.005)
            base = ImuBias(0.02 * rng.normal(size=3), 0.05 * rng.normal(size=3))
            pre = preintegrate(ms, dts, NOISE, bias_lin=base)
            for comp in range(6):
                db = np.zeros(6)
                db[comp] = h
                plus = preintegrate(
                    ms, dts, NOISE, ImuBias(base.gyro + db[:3], base.accel + db[3:])
                )
                minus = preintegrate(
                    ms, dts, NOISE, ImuBias(base.gyro - db[:3], base.accel - db[3:])
                )
                fd_r = (
                    log_so3(pre.delta_r.T @ plus.delta_r)
                    - log_so3(pre.delta_r.T @ minus.delta_r)
                ) / (2 * h)
                fd_v = (plus.delta_v - minus.delta_v) / (2 * h)
                fd_p = (plus.delta_p - minus.delta_p) / (2 * h)
                if comp < 3:
                    pairs = (
                        (fd_r, pre.dr_dbg[:, comp]),
                        (fd_v, pre.dv_dbg[:, comp]),
                        (fd_p, pre.dp_dbg[:, comp]),
                    )
                else:
                    pairs = (
                        (fd_v, pre.dv_dba[:, comp - 3]),
                        (fd_p, pre.dp_dba[:, comp - 3]),
                    )
                for fd, analytic in pairs:
                    scale = max(np.linalg.norm(fd), 1e-9)
                    assert np.linalg.norm(fd - analytic) / scale < 1e-5


class TestSimulatorConsistency:
    def test_noise_free_closure_one_second(self, clean_sim):
        gt = clean_sim.ground_truth
        ms, dts = clean_sim.imu_segment(0.0, 1.0)
        pre = preintegrate(ms, dts, clean_sim.config.noise)
        state = NavState(gt.rotations[0], gt.positions[0], gt.velocities[0], ImuBias(), 0.0)
        out = predict(state, pre, gt.gravity)
        k = int(round(1.0 / clean_sim.imu_dt))
        assert np.linalg.norm(out.position - gt.positions[k]) < 1e-6

    def test_covariance_matches_monte_carlo(self):
        """Propagated covariance vs the sample spread of noisy integrations."""
        rng = np.random.default_rng(8)
        n, dt, runs = 60, 0.005, 1500
        omegas = 0.5 * rng.normal(size=(n, 3))
        accels = 2.0 * rng.normal(size=(n, 3)) + [0, 0, 9.81]
        ms = [ImuMeasurement(k * dt, w, a) for k, (w, a) in enumerate(zip(omegas, accels))]
        pre = preintegrate(ms, np.full(n, dt), NOISE)

        sg = NOISE.gyro_noise_density / np.sqrt(dt)
        sa = NOISE.accel_noise_density / np.sqrt(dt)
        # vectorized noisy re-integrations
        r = np.tile(np.eye(3), (runs, 1, 1))
        v = np.zeros((runs, 3))
        p = np.zeros((runs, 3))
        for k in range(n):
            w = omegas[k] + sg * rng.standard_normal((runs, 3))
            a = accels[k] + sa * rng.standard_normal((runs, 3))
            ra = np.einsum("nij,nj->ni", r, a)
            p = p + v * dt + 0.5 * ra * dt * dt
            v = v + ra * dt
            angle = np.linalg.norm(w * dt, axis=1, keepdims=True)
            axis = w * dt / np.maximum(angle, 1e-300)
            kmat = np.zeros((runs, 3, 3))
            kmat[:, 0, 1], kmat[:, 0, 2] = -axis[:, 2], axis[:, 1]
            kmat[:, 1, 0], kmat[:, 1, 2] = axis[:, 2], -axis[:, 0]
            kmat[:, 2, 0], kmat[:, 2, 1] = -axis[:, 1], axis[:, 0]
            sin_a = np.sin(angle)[:, :, None]
            cos_a = np.cos(angle)[:, :, None]
            incr = np.eye(3) + sin_a * kmat + (1 - cos_a) * (kmat @ kmat)
            r = r @ incr

        errs = np.zeros((runs, 9))
        for i in range(runs):
            errs[i, 0:3] = log_so3(pre.delta_r.T @ r[i])
        errs[:, 3:6] = v - pre.delta_v
        errs[:, 6:9] = p - pre.delta_p
        sample = np.cov(errs.T)
        ratio = np.diag(sample) / np.diag(pre.covariance)
        assert np.all(ratio > 0.8) and np.all(ratio < 1.25)
