"""Minimal Lie-group toolbox for SO(3) rotations and rigid poses.

Rotations are plain 3x3 numpy arrays. Axis-angle vectors are 3-vectors in
radians whose magnitude is the rotation angle; the canonical representative
has magnitude in [0, pi].
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Below this angle the closed forms switch to their Taylor expansions.
SMALL_ANGLE = 1e-7


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that hat(v) @ w == cross(v, w)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of hat for skew-symmetric matrices."""
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def check_rotation(r: np.ndarray, tol: float = 1e-6) -> None:
    """Raise ValueError unless r is orthonormal with determinant +1."""
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        raise ValueError("rotation must be a finite 3x3 matrix")
    err = np.linalg.norm(r @ r.T - np.eye(3))
    if err > tol:
        raise ValueError(f"matrix is not orthonormal (|RR^T - I| = {err:.3e})")
    if abs(np.linalg.det(r) - 1.0) > tol:
        raise ValueError("matrix has determinant != +1")


def exp_so3(phi: np.ndarray) -> np.ndarray:
    """Rodrigues exponential map from axis-angle to a rotation matrix."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (3,) or not np.all(np.isfinite(phi)):
        raise ValueError("axis-angle input must be a finite 3-vector")
    angle = np.linalg.norm(phi)
    k = hat(phi)
    if angle < SMALL_ANGLE:
        # second-order Taylor of Rodrigues, exact to O(angle^3)
        return np.eye(3) + k + 0.5 * (k @ k)
    return (
        np.eye(3)
        + (np.sin(angle) / angle) * k
        + ((1.0 - np.cos(angle)) / angle**2) * (k @ k)
    )


def log_so3(r: np.ndarray) -> np.ndarray:
    """Axis-angle logarithm, canonical magnitude in [0, pi].

    Uses trace-based angle extraction with dedicated small-angle and
    near-pi branches; the latter extracts the axis from the largest
    diagonal entry to avoid dividing by sin(angle) ~ 0.
    """
    check_rotation(r, tol=1e-6)
    r = np.asarray(r, dtype=float)
    cos_angle = np.clip((np.trace(r) - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(cos_angle)
    w = vee(r - r.T)  # = 2 sin(angle) * axis

    if angle < SMALL_ANGLE:
        # log(R) ~ 0.5 * (1 + angle^2/6) * vee(R - R^T)
        return 0.5 * (1.0 + angle * angle / 6.0) * w

    if np.pi - angle > 1e-4:
        return (0.5 * angle / np.sin(angle)) * w

    # Near pi: R + R^T = 2I + 2(1 - cos) (aa^T - I) pins down aa^T.
    s = (r + r.T) * 0.5 - np.cos(angle) * np.eye(3)
    diag = np.diag(s) / (1.0 - np.cos(angle))
    i = int(np.argmax(diag))
    axis = np.empty(3)
    axis[i] = np.sqrt(max(diag[i], 0.0))
    for j in range(3):
        if j != i:
            axis[j] = s[i, j] / ((1.0 - np.cos(angle)) * axis[i])
    axis /= np.linalg.norm(axis)
    # vee(R - R^T) = 2 sin(angle) axis fixes the sign while sin(angle) > 0
    if np.dot(w, axis) < 0.0:
        axis = -axis
    return angle * axis


def right_jacobian_so3(phi: np.ndarray) -> np.ndarray:
    """Right Jacobian Jr with Exp(phi + d) ~ Exp(phi) Exp(Jr(phi) d)."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    k = hat(phi)
    if angle < SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + (k @ k) / 6.0
    return (
        np.eye(3)
        - ((1.0 - np.cos(angle)) / angle**2) * k
        + ((angle - np.sin(angle)) / angle**3) * (k @ k)
    )


def right_jacobian_inv_so3(phi: np.ndarray) -> np.ndarray:
    """Inverse of the right Jacobian."""
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    k = hat(phi)
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + (k @ k) / 12.0
    coef = 1.0 / angle**2 - (1.0 + np.cos(angle)) / (2.0 * angle * np.sin(angle))
    return np.eye(3) + 0.5 * k + coef * (k @ k)


def left_jacobian_so3(phi: np.ndarray) -> np.ndarray:
    """Left Jacobian; satisfies Jl(phi) = Jr(-phi)."""
    return right_jacobian_so3(-np.asarray(phi, dtype=float))


@dataclass
class RigidPose:
    """Rigid transform (rotation, translation): X_a = R @ X_b + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float)

    def compose(self, other: "RigidPose") -> "RigidPose":
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack of points (n, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


# --- minimal SE(3) support for pose-graph edges ------------------------------
# Tangent ordering is [phi, rho]: rotation first, then translation.


def se3_exp(xi: np.ndarray) -> RigidPose:
    """Exponential map from a 6-vector [phi, rho] to a rigid pose."""
    xi = np.asarray(xi, dtype=float)
    phi, rho = xi[:3], xi[3:]
    return RigidPose(exp_so3(phi), left_jacobian_so3(phi) @ rho)


def se3_log(pose: RigidPose) -> np.ndarray:
    """Logarithm map; inverse of se3_exp on the canonical domain."""
    phi = log_so3(pose.rotation)
    rho = np.linalg.solve(left_jacobian_so3(phi), pose.translation)
    return np.concatenate([phi, rho])


def se3_adjoint_algebra(xi: np.ndarray) -> np.ndarray:
    """Algebra adjoint ad(xi) in [phi, rho] ordering."""
    xi = np.asarray(xi, dtype=float)
    ph, rh = hat(xi[:3]), hat(xi[3:])
    out = np.zeros((6, 6))
    out[:3, :3] = ph
    out[3:, 3:] = ph
    out[3:, :3] = rh
    return out


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    """Left Jacobian of SE(3) via the adjoint series sum ad^n / (n+1)!.

    Converges to machine precision for the pose-graph-scale tangents used
    here; exact coupling between rotation and translation is required for
    the edge Jacobians to pass finite-difference checks.
    """
    ad = se3_adjoint_algebra(xi)
    out = np.eye(6)
    term = np.eye(6)
    for n in range(1, 40):
        term = term @ ad / (n + 1.0)
        out += term
        if np.abs(term).max() < 1e-18:
            break
    return out


def se3_right_jacobian(xi: np.ndarray) -> np.ndarray:
    """Right Jacobian of SE(3): Jr(xi) = Jl(-xi)."""
    return se3_left_jacobian(-np.asarray(xi, dtype=float))


def se3_adjoint(pose: RigidPose) -> np.ndarray:
    """Adjoint matrix in [phi, rho] ordering."""
    out = np.zeros((6, 6))
    out[:3, :3] = pose.rotation
    out[3:, 3:] = pose.rotation
    out[3:, :3] = hat(pose.translation) @ pose.rotation
    return out
