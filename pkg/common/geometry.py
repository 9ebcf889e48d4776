"""SE(3) algebra, pinhole camera model and plane transforms.

Conventions:
    - twists are 6-vectors ordered (translation, rotation);
    - poses are rigid transforms ``T_a_b`` mapping points of frame b into frame a;
    - planes are ``n . x + d = 0`` with unit normal ``n``.
"""
import math
from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from common.errors import (
    BehindCameraError,
    ConfigError,
    DegeneratePlaneError,
    IllConditionedError,
    InvalidDepthError,
    NoIntersectionError,
)

SMALL_ANGLE = 1e-8
PI_MARGIN = 1e-6
PLANE_EPS = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of a 3-vector."""
    v = np.asarray(v, dtype=float).reshape(3)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def vee(S: np.ndarray) -> np.ndarray:
    """3-vector of a skew-symmetric matrix."""
    return np.array([S[2, 1], S[0, 2], S[1, 0]], dtype=float)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform x_a = R x_b + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_tum(cls, values: Iterable[float]) -> "Pose":
        """From 'tx ty tz qx qy qz qw' values (scalar-last quaternion)."""
        tx, ty, tz, qx, qy, qz, qw = [float(v) for v in values]
        R = Rotation.from_quat([qx, qy, qz, qw]).as_matrix()
        return cls(R, [tx, ty, tz])

    def to_tum(self) -> np.ndarray:
        """As [tx, ty, tz, qx, qy, qz, qw]."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return np.concatenate([self.translation, q])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self * other."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform a 3-vector or an (N, 3) array."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    @property
    def center(self) -> np.ndarray:
        """Origin of frame a expressed in frame b (camera center for T_c_w)."""
        return -self.rotation.T @ self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return (
            np.linalg.norm(R.T @ R - np.eye(3)) < tol
            and abs(np.linalg.det(R) - 1.0) < tol
            and bool(np.all(np.isfinite(self.translation)))
        )

    def almost_equal(self, other: "Pose", tol: float = 1e-9) -> bool:
        return (
            np.linalg.norm(self.rotation - other.rotation) < tol
            and np.linalg.norm(self.translation - other.translation) < tol
        )

    def __repr__(self) -> str:
        return f"Pose(t={np.round(self.translation, 4).tolist()}, rotvec={np.round(so3_log(self.rotation), 4).tolist()})"


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rotation matrix of a rotation vector (Rodrigues)."""
    phi = np.asarray(phi, dtype=float).reshape(3)
    theta = np.linalg.norm(phi)
    W = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + math.sin(theta) / theta * W + (1.0 - math.cos(theta)) / theta**2 * W @ W


def _rotation_angle(R: np.ndarray) -> Tuple[float, np.ndarray]:
    axis_sin = vee(R - R.T) / 2.0
    theta = math.atan2(np.linalg.norm(axis_sin), (np.trace(R) - 1.0) / 2.0)
    return theta, axis_sin


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of a rotation matrix; raises near angle pi."""
    theta, axis_sin = _rotation_angle(np.asarray(R, dtype=float))
    if math.pi - theta < PI_MARGIN:
        raise IllConditionedError(f"Rotation angle {theta:.9f} is too close to pi")
    if theta < SMALL_ANGLE:
        return axis_sin
    return theta / math.sin(theta) * axis_sin


def _left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    W = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    return (
        np.eye(3)
        + (1.0 - math.cos(theta)) / theta**2 * W
        + (theta - math.sin(theta)) / theta**3 * W @ W
    )


def _left_jacobian_inverse(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    W = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * W + W @ W / 12.0
    coeff = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / theta**2
    return np.eye(3) - 0.5 * W + coeff * W @ W


def se3_exp(xi: np.ndarray) -> Pose:
    """Pose of a twist (translation, rotation)."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    return Pose(so3_exp(phi), _left_jacobian(phi) @ rho)


def se3_log(pose: Pose) -> np.ndarray:
    """Twist (translation, rotation) of a pose; raises IllConditionedError near angle pi."""
    phi = so3_log(pose.rotation)
    rho = _left_jacobian_inverse(phi) @ pose.translation
    return np.concatenate([rho, phi])


def adjoint(pose: Pose) -> np.ndarray:
    """6x6 adjoint: exp(Ad_T xi) T = T exp(xi)."""
    R, t = pose.rotation, pose.translation
    Ad = np.zeros((6, 6))
    Ad[:3, :3] = R
    Ad[:3, 3:] = skew(t) @ R
    Ad[3:, 3:] = R
    return Ad


def box_plus(pose: Pose, delta: np.ndarray) -> Pose:
    """Left-multiplicative update exp(delta) * pose."""
    return se3_exp(delta) @ pose


def box_minus(a: Pose, b: Pose) -> np.ndarray:
    """Twist delta with exp(delta) * b = a."""
    return se3_log(a @ b.inverse())


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics, pixel centers at integer coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"Focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ConfigError(f"Principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def scaled(self, level: int) -> "CameraIntrinsics":
        """Intrinsics of pyramid level `level` (factor 2 per level)."""
        if level == 0:
            return self
        s = 2.0**level
        return CameraIntrinsics(
            fx=self.fx / s,
            fy=self.fy / s,
            cx=(self.cx + 0.5) / s - 0.5,
            cy=(self.cy + 0.5) / s - 0.5,
            width=self.width // int(s),
            height=self.height // int(s),
        )

    def contains(self, uv: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Mask of pixels at least `margin` inside the image."""
        uv = np.asarray(uv, dtype=float)
        u, v = uv[..., 0], uv[..., 1]
        return (u >= margin) & (v >= margin) & (u <= self.width - 1 - margin) & (v <= self.height - 1 - margin)


@dataclass(frozen=True, eq=False)
class PlaneCoeffs:
    """Plane n . x + d = 0."""

    normal: np.ndarray
    d: float

    def __post_init__(self):
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=float).reshape(3))
        object.__setattr__(self, "d", float(self.d))

    @classmethod
    def from_point_normal(cls, point: np.ndarray, normal: np.ndarray) -> "PlaneCoeffs":
        n = np.asarray(normal, dtype=float)
        n = n / np.linalg.norm(n)
        return cls(n, -float(n @ np.asarray(point, dtype=float)))

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.normal + self.d

    def is_valid(self, tol: float = 1e-9) -> bool:
        return abs(np.linalg.norm(self.normal) - 1.0) < tol and math.isfinite(self.d)


def project(K: CameraIntrinsics, x: np.ndarray) -> np.ndarray:
    """Pixel of a camera-frame point."""
    x = np.asarray(x, dtype=float).reshape(3)
    if x[2] <= 0:
        raise BehindCameraError(f"Point {x.tolist()} is behind the camera")
    return np.array([K.fx * x[0] / x[2] + K.cx, K.fy * x[1] / x[2] + K.cy])


def project_points(K: CameraIntrinsics, X: np.ndarray, min_depth: float = 1e-9) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns (uv, in-front mask), uv is NaN where masked."""
    X = np.asarray(X, dtype=float)
    z = X[..., 2]
    valid = z > min_depth
    safe_z = np.where(valid, z, 1.0)
    uv = np.stack([K.fx * X[..., 0] / safe_z + K.cx, K.fy * X[..., 1] / safe_z + K.cy], axis=-1)
    uv[~valid] = np.nan
    return uv, valid


def normalized_ray(K: CameraIntrinsics, p: np.ndarray) -> np.ndarray:
    """K^-1 [u, v, 1] for one pixel or an (N, 2) array."""
    p = np.asarray(p, dtype=float)
    x = (p[..., 0] - K.cx) / K.fx
    y = (p[..., 1] - K.cy) / K.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def backproject(K: CameraIntrinsics, p: np.ndarray, inv_depth: float) -> np.ndarray:
    """Camera-frame point at inverse depth `inv_depth` along pixel p."""
    if not inv_depth > 0:
        raise InvalidDepthError(f"Inverse depth must be positive, got {inv_depth}")
    return normalized_ray(K, p) / inv_depth


def transform_plane(T_h_w: Pose, omega_w: PlaneCoeffs) -> PlaneCoeffs:
    """Express a world plane in frame h."""
    n = T_h_w.rotation @ omega_w.normal
    d = omega_w.d - T_h_w.translation @ n
    norm = np.linalg.norm(n)
    return PlaneCoeffs(n / norm, d / norm)


def ray_plane_inverse_depth(xbar: np.ndarray, plane: PlaneCoeffs) -> float:
    """Inverse depth at which ray xbar (z = 1) meets a plane given in the same frame."""
    if abs(plane.d) <= PLANE_EPS:
        raise DegeneratePlaneError("Plane passes through the camera center")
    rho = -float(plane.normal @ np.asarray(xbar, dtype=float)) / plane.d
    if not rho > 0:
        raise NoIntersectionError("Ray is parallel to the plane or meets it behind the camera")
    return rho


def ray_plane_inverse_depths(xbar: np.ndarray, normals: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Vectorized ray_plane_inverse_depth; non-positive or undefined entries become NaN."""
    d = np.asarray(d, dtype=float)
    safe_d = np.where(np.abs(d) > PLANE_EPS, d, np.nan)
    rho = -np.einsum("...i,...i->...", xbar, normals) / safe_d
    return np.where(rho > 0, rho, np.nan)
