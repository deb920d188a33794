import numpy as np
import pytest

from vislam.manifold import (
    RigidPose,
    check_rotation,
    exp_so3,
    hat,
    left_jacobian_so3,
    log_so3,
    right_jacobian_inv_so3,
    right_jacobian_so3,
    se3_exp,
    se3_left_jacobian,
    se3_log,
    vee,
)


def exp_series(phi, terms=20):
    """Truncated matrix-exponential series, the independent oracle."""
    k = hat(phi)
    out = np.eye(3)
    term = np.eye(3)
    for n in range(1, terms):
        term = term @ k / n
        out = out + term
    return out


class TestExp:
    def test_zero_is_identity(self):
        assert np.array_equal(exp_so3(np.zeros(3)), np.eye(3))

    def test_quarter_turn_about_x_maps_y_to_z(self):
        r = exp_so3(np.array([np.pi / 2, 0, 0]))
        assert np.allclose(r @ np.array([0, 1, 0]), [0, 0, 1], atol=1e-12)

    def test_matches_series_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            phi = rng.normal(size=3)
            phi *= 0.3 / np.linalg.norm(phi)
            assert np.allclose(exp_so3(phi), exp_series(phi), atol=1e-14)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            exp_so3(np.array([np.nan, 0, 0]))

    def test_branch_continuity_at_switch(self):
        # Taylor and Rodrigues formulas agree at the 1e-7 crossover
        axis = np.array([0.6, -0.48, 0.64])
        phi = axis / np.linalg.norm(axis) * 1e-7
        k = hat(phi)
        taylor = np.eye(3) + k + 0.5 * (k @ k)
        angle = np.linalg.norm(phi)
        rodrigues = (
            np.eye(3)
            + np.sin(angle) / angle * k
            + (1 - np.cos(angle)) / angle**2 * (k @ k)
        )
        assert np.abs(taylor - rodrigues).max() < 1e-12


class TestLog:
    def test_identity(self):
        assert np.array_equal(log_so3(np.eye(3)), np.zeros(3))

    @pytest.mark.parametrize("norm", [1e-9, 0.5, 3.0])
    def test_round_trip(self, norm):
        rng = np.random.default_rng(3)
        for _ in range(10):
            v = rng.normal(size=3)
            v *= norm / np.linalg.norm(v)
            assert np.allclose(log_so3(exp_so3(v)), v, atol=1e-9)

    def test_pi_about_x(self):
        r = exp_series(np.array([np.pi, 0, 0]), terms=40)
        out = log_so3(r)
        assert np.allclose(np.abs(out), [np.pi, 0, 0], atol=1e-7)

    def test_near_pi_against_series_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            v = axis * (np.pi - 1e-5)
            assert np.allclose(log_so3(exp_series(v, terms=40)), v, atol=1e-6)

    def test_rejects_non_orthonormal(self):
        bad = np.eye(3) + 1e-3
        with pytest.raises(ValueError):
            log_so3(bad)

    def test_round_trip_property(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            v = rng.normal(size=3)
            v *= rng.uniform(0, np.pi - 1e-6) / np.linalg.norm(v)
            assert np.allclose(log_so3(exp_so3(v)), v, atol=1e-9)


class TestHat:
    def test_zero(self):
        assert np.array_equal(hat(np.zeros(3)), np.zeros((3, 3)))

    def test_axis_example(self):
        assert np.allclose(hat(np.array([0, 0, -1.0])) @ np.array([1, 0, 0]), [0, -1, 0])

    def test_cross_product_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            v, w = rng.normal(size=3), rng.normal(size=3)
            assert np.allclose(hat(v) @ w, np.cross(v, w), atol=1e-15)

    def test_vee_inverse(self):
        rng = np.random.default_rng(7)
        v = rng.normal(size=3)
        assert np.array_equal(vee(hat(v)), v)


class TestRightJacobian:
    def test_zero_is_identity(self):
        assert np.allclose(right_jacobian_so3(np.zeros(3)), np.eye(3))

    def test_finite_difference(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            phi = rng.normal(size=3)
            delta = rng.normal(size=3) * 1e-6
            lhs = exp_so3(phi + delta)
            rhs = exp_so3(phi) @ exp_so3(right_jacobian_so3(phi) @ delta)
            # agreement is second order in the perturbation
            assert np.linalg.norm(lhs - rhs) < 1e-11

    def test_left_right_symmetry(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            phi = rng.normal(size=3)
            assert np.allclose(
                right_jacobian_so3(phi), right_jacobian_so3(-phi).T, atol=1e-12
            )
            assert np.allclose(left_jacobian_so3(phi), right_jacobian_so3(-phi), atol=1e-15)

    def test_inverse(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            phi = rng.normal(size=3)
            prod = right_jacobian_so3(phi) @ right_jacobian_inv_so3(phi)
            assert np.allclose(prod, np.eye(3), atol=1e-10)


class TestGroupProperties:
    def test_closure_keeps_invariants(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            r = exp_so3(rng.normal(size=3)) @ exp_so3(rng.normal(size=3))
            check_rotation(r, tol=1e-9)


class TestRigidPose:
    def test_compose_inverse(self):
        rng = np.random.default_rng(12)
        a = RigidPose(exp_so3(rng.normal(size=3)), rng.normal(size=3))
        b = RigidPose(exp_so3(rng.normal(size=3)), rng.normal(size=3))
        ident = a.compose(b).compose(b.inverse()).compose(a.inverse())
        assert np.allclose(ident.matrix(), np.eye(4), atol=1e-12)

    def test_apply_matches_matrix(self):
        rng = np.random.default_rng(13)
        pose = RigidPose(exp_so3(rng.normal(size=3)), rng.normal(size=3))
        pts = rng.normal(size=(5, 3))
        hom = np.concatenate([pts, np.ones((5, 1))], axis=1) @ pose.matrix().T
        assert np.allclose(pose.apply(pts), hom[:, :3], atol=1e-12)


class TestSe3:
    def test_round_trip(self):
        rng = np.random.default_rng(14)
        for _ in range(50):
            xi = rng.normal(size=6)
            xi[:3] *= rng.uniform(0, np.pi - 0.05) / np.linalg.norm(xi[:3])
            assert np.allclose(se3_log(se3_exp(xi)), xi, atol=1e-9)

    def test_left_jacobian_finite_difference(self):
        rng = np.random.default_rng(15)
        for _ in range(30):
            xi = rng.normal(size=6) * 0.7
            delta = rng.normal(size=6) * 1e-6
            lhs = se3_exp(xi + delta).matrix()
            rhs = se3_exp(se3_left_jacobian(xi) @ delta).compose(se3_exp(xi)).matrix()
            assert np.linalg.norm(lhs - rhs) < 1e-10
