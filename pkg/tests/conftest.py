"""Shared fixtures: canonical simulation configurations reused across tests."""
import numpy as np
import pytest

from vislam.preintegration import ImuBias
from vislam.simulator import SimConfig, TrajectoryModel, generate


def excited_model(duration=16.0):
    """Well-excited trajectory making scale, gravity and biases observable."""
    return TrajectoryModel(
        kind="lissajous",
        duration=duration,
        attitude="fixed",
        amplitudes=np.array([2.0, 1.5, 0.8]),
        rates=np.array([0.9, 1.3, 0.7]),
        phases=np.array([0.0, 1.1, 2.3]),
        wobble_amplitude=np.array([0.25, 0.3, 0.6]),
        wobble_rate=np.array([0.8, 0.6, 0.4]),
    )


def circle_model(duration=8.0, radius=2.0, rate=0.5):
    return TrajectoryModel(
        kind="circle",
        duration=duration,
        attitude="yaw_follow",
        radius=radius,
        angular_rate=rate,
        wobble_amplitude=np.array([0.05, 0.08, 0.0]),
        wobble_rate=np.array([0.9, 0.7, 0.0]),
    )


DEFAULT_BIAS = ImuBias(np.array([0.02, -0.01, 0.03]), np.array([0.05, 0.1, -0.05]))


@pytest.fixture(scope="session")
def clean_sim():
    """Noise-free, bias-free excited trajectory (exact oracle source)."""
    cfg = SimConfig(imu_noise_scale=0.0, pixel_noise=0.0, landmark_count=60, seed=1)
    return generate(excited_model(), cfg)


@pytest.fixture(scope="session")
def biased_sim():
    """Noise-free with injected constant biases, monocular scale 2.3."""
    cfg = SimConfig(
        imu_noise_scale=0.0,
        pixel_noise=0.0,
        landmark_count=60,
        seed=7,
        scale_true=2.3,
        bias=DEFAULT_BIAS,
    )
    return generate(excited_model(), cfg)


@pytest.fixture(scope="session")
def noisy_sim():
    """Sensor-grade noise with injected biases, 16 s excited trajectory."""
    cfg = SimConfig(
        imu_noise_scale=1.0,
        pixel_noise=1.0,
        landmark_count=200,
        seed=13,
        scale_true=2.3,
        bias=DEFAULT_BIAS,
    )
    return generate(excited_model(), cfg)


@pytest.fixture(scope="session")
def tracking_sim():
    """Noise-free circle with dense landmarks for estimator tests."""
    cfg = SimConfig(imu_noise_scale=0.0, pixel_noise=0.0, landmark_count=400, seed=11)
    return generate(circle_model(), cfg)
