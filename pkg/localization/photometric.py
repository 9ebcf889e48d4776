"""Photometric residuals, robust weights and Jacobians.

Two residual kinds share one vectorized kernel:

* non-surfel: the patch is warped with the point's free inverse depth;
* surfel: the patch is warped with the homography induced by the associated
  world plane expressed in the host frame, so the residual depends on the
  host's global pose and carries no inverse-depth Jacobian.

Frame state vectors are (pose twist[6], a, b) with left pose perturbations.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from common.errors import DegeneratePlaneError, InvalidDepthError
from common.geometry import CameraIntrinsics, PlaneCoeffs, Pose, normalized_ray, transform_plane
from common.image import sample
from config.constants import PATCH_PATTERN
from localization.state import FRAME_DIM, FrameState

logger = logging.getLogger(__name__)

PLANE_EPS = 1e-9
DEFAULT_GAMMA = 9.0
DEFAULT_GRADIENT_C = 50.0


def affine_pair(host: FrameState, target: FrameState) -> Tuple[float, float]:
    """Relative brightness (a_th, b_th) so that I_t ~ a_th * I_h + b_th."""
    a_th = (target.exposure_time * math.exp(target.a)) / (host.exposure_time * math.exp(host.a))
    return a_th, target.b - a_th * host.b


def huber_weight(r: np.ndarray, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    abs_r = np.abs(r)
    return np.where(abs_r <= gamma, 1.0, gamma / np.maximum(abs_r, 1e-300))


def huber_energy(r: np.ndarray, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    abs_r = np.abs(r)
    return np.where(abs_r <= gamma, r * r, 2.0 * gamma * abs_r - gamma * gamma)


def gradient_weight(grad_norm: np.ndarray, c: float = DEFAULT_GRADIENT_C) -> np.ndarray:
    grad_sq = np.asarray(grad_norm, dtype=float) ** 2
    return c * c / (c * c + grad_sq)


def robust_weight(r, grad, gamma: float = DEFAULT_GAMMA, c: float = DEFAULT_GRADIENT_C):
    """Gradient weight c^2/(c^2+|grad|^2) times the Huber IRLS weight."""
    return gradient_weight(grad, c) * huber_weight(r, gamma)


def compute_homography(T_t_h: Pose, omega_h: PlaneCoeffs, K: CameraIntrinsics) -> np.ndarray:
    """Plane-induced homography K (R - t n^T / d) K^-1 from host to target pixels."""
    if abs(omega_h.d) <= PLANE_EPS:
        raise DegeneratePlaneError(f"Plane offset {omega_h.d} too small, plane passes through the host center")
    M = T_t_h.rotation - np.outer(T_t_h.translation, omega_h.normal) / omega_h.d
    return K.matrix @ M @ K.inverse_matrix


@dataclass(eq=False)
class PatchEval:
    """Vectorized evaluation of N patches between one host and one target frame."""

    residuals: np.ndarray  # (N, P)
    valid: np.ndarray  # (N,)
    weights: np.ndarray  # (N, P) IRLS weights, zero where invalid
    energy: np.ndarray  # (N,) robust energy per block, zero where invalid
    uv_target: np.ndarray  # (N, P, 2)
    inv_depth: np.ndarray  # (N, P) host inverse depth used per pattern pixel
    J_host: Optional[np.ndarray] = None  # (N, P, 8)
    J_target: Optional[np.ndarray] = None  # (N, P, 8)
    J_rho: Optional[np.ndarray] = None  # (N, P), non-surfel only


def _level_pixels(pixels: np.ndarray, level: int) -> np.ndarray:
    if level == 0:
        return pixels
    s = 2.0**level
    return (pixels + 0.5) / s - 0.5


def evaluate_patches(
    host: FrameState,
    target: FrameState,
    K: CameraIntrinsics,
    pixels: np.ndarray,
    inv_depths: Optional[np.ndarray] = None,
    plane_normals: Optional[np.ndarray] = None,
    plane_d: Optional[np.ndarray] = None,
    pattern: np.ndarray = PATCH_PATTERN,
    level: int = 0,
    gamma: float = DEFAULT_GAMMA,
    gradient_c: float = DEFAULT_GRADIENT_C,
    jacobians: bool = True,
    margin: float = 1.0,
    pixel_mask: Optional[np.ndarray] = None,
) -> PatchEval:
    """Residuals (and Jacobians) of patches hosted at `pixels` (level-0 coordinates).

    Pass `inv_depths` for non-surfel blocks or world planes
    (`plane_normals`, `plane_d`) for surfel blocks. `pixel_mask` (N, P)
    selects the pattern pixels that contribute; the others get zero
    residual and weight.
    """
    surfel = plane_normals is not None
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    pattern = np.asarray(pattern, dtype=float).reshape(-1, 2)
    n, n_pat = len(pixels), len(pattern)
    Kl = K.scaled(level)
    host_level = host.pyramid[level]
    target_level = target.pyramid[level]

    host_px = _level_pixels(pixels, level)[:, None, :] + pattern[None, :, :]
    xbar = normalized_ray(Kl, host_px)
    T_t_h = target.T_c_w @ host.T_c_w.inverse()
    R, t = T_t_h.rotation, T_t_h.translation

    valid = np.ones(n, dtype=bool)
    if surfel:
        normals_w = np.asarray(plane_normals, dtype=float).reshape(-1, 3)
        n_h = normals_w @ host.T_c_w.rotation.T
        d_h = np.asarray(plane_d, dtype=float).reshape(-1) - n_h @ host.T_c_w.translation
        usable = np.abs(d_h) > PLANE_EPS
        safe_d = np.where(usable, d_h, 1.0)
        rho = -np.einsum("npi,ni->np", xbar, n_h) / safe_d[:, None]
        valid &= usable
        # Target pixels through the plane-induced homography
        M = R[None] - np.einsum("i,nj->nij", t, n_h) / safe_d[:, None, None]
        H = np.einsum("ij,njk,kl->nil", Kl.matrix, M, Kl.inverse_matrix)
        homog_src = np.concatenate([host_px, np.ones((n, n_pat, 1))], axis=2)
        homog = np.einsum("nij,npj->npi", H, homog_src)
        w3 = homog[..., 2]
        safe_w3 = np.where(w3 > 0, w3, 1.0)
        uv = homog[..., :2] / safe_w3[..., None]
        in_front = w3 > 0
    else:
        rho = np.broadcast_to(np.asarray(inv_depths, dtype=float).reshape(-1, 1), (n, n_pat)).copy()
        in_front = None

    valid &= np.all(np.isfinite(rho) & (rho > 0), axis=1)
    safe_rho = np.where(rho > 0, rho, 1.0)
    X_h = xbar / safe_rho[..., None]
    X_t = X_h @ R.T + t
    z = X_t[..., 2]
    if in_front is None:
        in_front = z > 1e-9
        safe_z = np.where(in_front, z, 1.0)
        uv = np.stack([Kl.fx * X_t[..., 0] / safe_z + Kl.cx, Kl.fy * X_t[..., 1] / safe_z + Kl.cy], axis=-1)
    valid &= np.all(in_front, axis=1)
    valid &= np.all(Kl.contains(np.where(in_front[..., None], uv, -1.0), margin=margin), axis=1)
    uv = np.where(valid[:, None, None], uv, 0.0)

    I_t, gx, gy = target_level.sample(uv)
    I_h = sample(host_level.image, host_px)
    a_th, b_th = affine_pair(host, target)
    r = I_t - a_th * I_h - b_th
    keep = np.broadcast_to(valid[:, None], r.shape)
    if pixel_mask is not None:
        keep = keep & np.asarray(pixel_mask, dtype=bool).reshape(n, n_pat)
    r = np.where(keep, r, 0.0)

    grad_norm = np.sqrt(gx**2 + gy**2)
    w_grad = gradient_weight(grad_norm, gradient_c)
    weights = np.where(keep, w_grad * huber_weight(r, gamma), 0.0)
    energy = np.where(valid, np.sum(w_grad * huber_energy(r, gamma), axis=1), 0.0)
    result = PatchEval(r, valid, weights, energy, uv, rho)
    if not jacobians:
        return result

    safe_z = np.where(valid[:, None], z, 1.0)
    x, y = X_t[..., 0], X_t[..., 1]
    # dr/dX_t = grad(I_t) * dpi/dX_t
    g = np.stack(
        [
            gx * Kl.fx / safe_z,
            gy * Kl.fy / safe_z,
            -(gx * Kl.fx * x + gy * Kl.fy * y) / safe_z**2,
        ],
        axis=-1,
    )

    J_target = np.zeros((n, n_pat, FRAME_DIM))
    J_target[..., :3] = g
    J_target[..., 3:6] = np.cross(X_t, g)
    J_target[..., 6] = -a_th * (I_h - host.b)
    J_target[..., 7] = -1.0

    g_h = g @ R  # R^T g per pixel
    if surfel:
        n_dot_x = np.einsum("npi,ni->np", xbar, n_h)
        safe_nx = np.where(np.abs(n_dot_x) > 1e-12, n_dot_x, 1e-12)
        proj = np.einsum("npi,npi->np", g_h, xbar) / safe_nx
        g_h = g_h - proj[..., None] * n_h[:, None, :]
    J_host = np.zeros((n, n_pat, FRAME_DIM))
    J_host[..., :3] = -g_h
    J_host[..., 3:6] = np.cross(g_h, X_h)
    J_host[..., 6] = a_th * (I_h - host.b)
    J_host[..., 7] = a_th

    mask = valid[:, None, None]
    result.J_host = np.where(mask, J_host, 0.0)
    result.J_target = np.where(mask, J_target, 0.0)
    if not surfel:
        J_rho = -np.einsum("npi,npi->np", g @ R, xbar) / safe_rho**2
        result.J_rho = np.where(valid[:, None], J_rho, 0.0)
    return result


@dataclass(eq=False)
class ResidualBlock:
    """Residual of one point's patch in one target frame."""

    host: FrameState
    target: FrameState
    K: CameraIntrinsics
    pixel: np.ndarray
    point_id: int = -1
    inv_depth: Optional[float] = None
    plane: Optional[PlaneCoeffs] = None
    pattern: np.ndarray = PATCH_PATTERN
    residuals: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    valid: bool = False
    J_host: Optional[np.ndarray] = None
    J_target: Optional[np.ndarray] = None
    J_rho: Optional[np.ndarray] = None

    @property
    def host_id(self) -> int:
        return self.host.frame_id

    @property
    def target_id(self) -> int:
        return self.target.frame_id

    @property
    def is_surfel(self) -> bool:
        return self.plane is not None

    def evaluate(self, jacobians: bool) -> PatchEval:
        if self.is_surfel:
            return evaluate_patches(
                self.host,
                self.target,
                self.K,
                self.pixel[None],
                plane_normals=self.plane.normal[None],
                plane_d=np.array([self.plane.d]),
                pattern=self.pattern,
                jacobians=jacobians,
            )
        return evaluate_patches(
            self.host,
            self.target,
            self.K,
            self.pixel[None],
            inv_depths=np.array([self.inv_depth]),
            pattern=self.pattern,
            jacobians=jacobians,
        )


def _filled(block: ResidualBlock, ev: PatchEval) -> ResidualBlock:
    return replace(
        block,
        residuals=ev.residuals[0],
        weights=ev.weights[0],
        valid=bool(ev.valid[0]),
        J_host=None if ev.J_host is None else ev.J_host[0],
        J_target=None if ev.J_target is None else ev.J_target[0],
        J_rho=None if ev.J_rho is None else ev.J_rho[0],
    )


def residual_nonsurfel(
    pixel: np.ndarray,
    host: FrameState,
    target: FrameState,
    inv_depth: float,
    K: CameraIntrinsics,
    pattern: np.ndarray = PATCH_PATTERN,
    point_id: int = -1,
) -> ResidualBlock:
    """Patch residual with a free inverse depth; invalid blocks have valid=False."""
    if not inv_depth > 0:
        raise InvalidDepthError(f"Inverse depth must be positive, got {inv_depth}")
    block = ResidualBlock(host, target, K, np.asarray(pixel, dtype=float), point_id, inv_depth=inv_depth, pattern=pattern)
    return _filled(block, block.evaluate(jacobians=False))


def residual_surfel(
    pixel: np.ndarray,
    host: FrameState,
    target: FrameState,
    omega_w: PlaneCoeffs,
    K: CameraIntrinsics,
    pattern: np.ndarray = PATCH_PATTERN,
    point_id: int = -1,
) -> ResidualBlock:
    """Patch residual through the homography of a world plane.

    The host and target global poses (T_h_w, T_t_w) are taken from the frame states.
    """
    omega_h = transform_plane(host.T_c_w, omega_w)
    if abs(omega_h.d) <= PLANE_EPS:
        raise DegeneratePlaneError("Plane passes through the host camera center")
    block = ResidualBlock(host, target, K, np.asarray(pixel, dtype=float), point_id, plane=omega_w, pattern=pattern)
    return _filled(block, block.evaluate(jacobians=False))


def residual_jacobians(block: ResidualBlock) -> ResidualBlock:
    """Block with analytic Jacobians w.r.t. host/target (pose, a, b) and, non-surfel only, inverse depth."""
    return _filled(block, block.evaluate(jacobians=True))
