"""Tests for photometric residuals, homographies and Jacobians."""
import numpy as np
import pytest

from common.errors import DegeneratePlaneError, InvalidDepthError
from common.geometry import (
    CameraIntrinsics,
    PlaneCoeffs,
    Pose,
    box_plus,
    normalized_ray,
    project,
    ray_plane_inverse_depth,
    se3_exp,
    transform_plane,
)
from common.image import ImagePyramid, sample
from config.constants import ScenePreset
from localization.photometric import (
    affine_pair,
    compute_homography,
    gradient_weight,
    huber_energy,
    huber_weight,
    residual_jacobians,
    residual_nonsurfel,
    residual_surfel,
    robust_weight,
)
from localization.state import FrameState
from synth.presets import build_preset
from synth.world import make_scene, render_image

K = CameraIntrinsics(100.0, 100.0, 79.5, 59.5, 160, 120)
CENTER = np.array([[0.0, 0.0]])
FD_STEP = 1e-6


def ramp_pyramid(alpha=2.0, beta=1.5, offset=20.0):
    """Linear intensity ramp: bilinear sampling and central-difference gradients are exact."""
    v, u = np.mgrid[0:120, 0:160].astype(float)
    return ImagePyramid.from_image(alpha * u + beta * v + offset)


def frames(rng, pyramid=None):
    pyramid = pyramid or ramp_pyramid()
    host_pose = se3_exp(np.concatenate([rng.uniform(-0.2, 0.2, 3), rng.uniform(-0.05, 0.05, 3)]))
    rel = se3_exp(np.concatenate([rng.uniform(-0.1, 0.1, 3), rng.uniform(-0.03, 0.03, 3)]))
    host = FrameState(0, pyramid, host_pose, exposure_time=1.0, a=rng.uniform(-0.1, 0.1), b=rng.uniform(-2, 2))
    target = FrameState(1, pyramid, rel @ host_pose, exposure_time=1.2, a=rng.uniform(-0.1, 0.1), b=rng.uniform(-2, 2))
    return host, target


def world_plane(host, rng):
    """A plane roughly 3 m in front of the host camera, slightly tilted."""
    n_h = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), -1.0])
    omega_h = PlaneCoeffs.from_point_normal([0.0, 0.0, 3.0], n_h)
    return transform_plane(host.T_c_w.inverse(), omega_h)


def numeric_frame_jacobian(residual_fn, frame, attr):
    """Central differences of residual_fn over the 8 state variables of one frame."""
    cols = []
    for k in range(8):
        values = []
        for sign in (1.0, -1.0):
            if k < 6:
                delta = np.zeros(6)
                delta[k] = sign * FD_STEP
                perturbed = frame.copy_with(T_c_w=box_plus(frame.T_c_w, delta))
            elif k == 6:
                perturbed = frame.copy_with(a=frame.a + sign * FD_STEP)
            else:
                perturbed = frame.copy_with(b=frame.b + sign * FD_STEP)
            values.append(residual_fn(**{attr: perturbed}))
        cols.append((values[0] - values[1]) / (2.0 * FD_STEP))
    return np.stack(cols, axis=-1)


def assert_jacobian_close(numeric, analytic):
    scale = max(1.0, np.abs(numeric).max())
    assert np.allclose(numeric, analytic, rtol=1e-4, atol=1e-4 * scale)


def test_huber_and_gradient_weights():
    """Huber is quadratic inside gamma and linear outside; the gradient weight decays with |grad|."""
    r = np.array([0.0, 3.0, 9.0, 18.0])
    assert np.allclose(huber_energy(r, 9.0), [0.0, 9.0, 81.0, 2 * 9 * 18 - 81])
    assert np.allclose(huber_weight(r, 9.0), [1.0, 1.0, 1.0, 0.5])
    assert gradient_weight(0.0, 50.0) == pytest.approx(1.0)
    assert gradient_weight(50.0, 50.0) == pytest.approx(0.5)
    assert robust_weight(18.0, 50.0, 9.0, 50.0) == pytest.approx(0.25)


def test_affine_pair_composes_exposure_and_brightness():
    """a_th and b_th follow from exposure times and affine parameters."""
    pyramid = ramp_pyramid()
    host = FrameState(0, pyramid, Pose.identity(), exposure_time=2.0, a=0.1, b=3.0)
    target = FrameState(1, pyramid, Pose.identity(), exposure_time=1.0, a=-0.2, b=1.0)
    a_th, b_th = affine_pair(host, target)
    assert a_th == pytest.approx(0.5 * np.exp(-0.3))
    assert b_th == pytest.approx(1.0 - a_th * 3.0)


def test_identity_warp_residual_is_brightness_offset():
    """Same image and pose: the residual is minus the target brightness offset."""
    pyramid = ramp_pyramid()
    host = FrameState(0, pyramid, Pose.identity())
    target = FrameState(1, pyramid, Pose.identity(), b=5.0)
    block = residual_nonsurfel(np.array([80.0, 60.0]), host, target, 0.5, K)
    assert block.valid
    assert np.allclose(block.residuals, -5.0)


def test_nonsurfel_rejects_bad_depth():
    """Inverse depth must be positive."""
    host = FrameState(0, ramp_pyramid(), Pose.identity())
    with pytest.raises(InvalidDepthError):
        residual_nonsurfel(np.array([80.0, 60.0]), host, host, 0.0, K)


def test_out_of_image_block_invalid():
    """Blocks projecting outside the target are invalid, not errors."""
    host = FrameState(0, ramp_pyramid(), Pose.identity())
    target = FrameState(1, ramp_pyramid(), se3_exp([5.0, 0.0, 0.0, 0.0, 0.0, 0.0]))
    block = residual_nonsurfel(np.array([80.0, 60.0]), host, target, 1.0, K)
    assert not block.valid


def test_surfel_plane_through_host_center_raises():
    """A plane through the host camera center has no homography."""
    host = FrameState(0, ramp_pyramid(), Pose.identity())
    with pytest.raises(DegeneratePlaneError):
        residual_surfel(np.array([80.0, 60.0]), host, host, PlaneCoeffs([1.0, 0.0, 0.0], 0.0), K)


def test_nonsurfel_jacobians_match_finite_differences():
    """Analytic host, target and inverse-depth Jacobians agree with central differences."""
    rng = np.random.default_rng(1)
    for _ in range(500):
        host, target = frames(rng)
        pixel = rng.uniform([40.0, 30.0], [120.0, 90.0])
        rho = rng.uniform(0.2, 0.5)

        def residual(host=host, target=target, rho=rho):
            return residual_nonsurfel(pixel, host, target, rho, K).residuals

        block = residual_jacobians(residual_nonsurfel(pixel, host, target, rho, K))
        if not block.valid:
            continue
        assert_jacobian_close(numeric_frame_jacobian(residual, host, "host"), block.J_host)
        assert_jacobian_close(numeric_frame_jacobian(residual, target, "target"), block.J_target)
        d_rho = (residual(rho=rho + FD_STEP) - residual(rho=rho - FD_STEP)) / (2.0 * FD_STEP)
        assert_jacobian_close(d_rho, block.J_rho)


def test_surfel_jacobians_match_finite_differences():
    """Surfel residual Jacobians agree with central differences and have no depth term."""
    rng = np.random.default_rng(2)
    checked = 0
    for _ in range(500):
        host, target = frames(rng)
        omega_w = world_plane(host, rng)
        pixel = rng.uniform([40.0, 30.0], [120.0, 90.0])

        def residual(host=host, target=target):
            return residual_surfel(pixel, host, target, omega_w, K).residuals

        block = residual_jacobians(residual_surfel(pixel, host, target, omega_w, K))
        if not block.valid:
            continue
        checked += 1
        assert block.J_rho is None
        assert_jacobian_close(numeric_frame_jacobian(residual, host, "host"), block.J_host)
        assert_jacobian_close(numeric_frame_jacobian(residual, target, "target"), block.J_target)
    assert checked > 250


def test_surfel_residual_equals_nonsurfel_at_induced_depth():
    """With the plane-induced inverse depth both residual kinds coincide."""
    rng = np.random.default_rng(3)
    v, u = np.mgrid[0:120, 0:160].astype(float)
    pyramid = ImagePyramid.from_image(128.0 + 60.0 * np.sin(u / 6.0) * np.cos(v / 9.0))
    compared = 0
    for _ in range(1000):
        host, target = frames(rng, pyramid)
        omega_w = world_plane(host, rng)
        pixel = rng.uniform([20.0, 20.0], [140.0, 100.0])
        rho = ray_plane_inverse_depth(normalized_ray(K, pixel), transform_plane(host.T_c_w, omega_w))
        surfel = residual_surfel(pixel, host, target, omega_w, K, pattern=CENTER)
        plain = residual_nonsurfel(pixel, host, target, rho, K, pattern=CENTER)
        assert surfel.valid == plain.valid
        if surfel.valid:
            compared += 1
            assert np.allclose(surfel.residuals, plain.residuals, atol=1e-10)
    assert compared > 500


def test_homography_maps_plane_points():
    """H p_h is the target projection of the plane point seen at p_h."""
    rng = np.random.default_rng(4)
    for _ in range(50):
        host, target = frames(rng)
        omega_w = world_plane(host, rng)
        omega_h = transform_plane(host.T_c_w, omega_w)
        T_t_h = target.T_c_w @ host.T_c_w.inverse()
        H = compute_homography(T_t_h, omega_h, K)
        p_h = rng.uniform([0.0, 0.0], [159.0, 119.0])
        X_h = normalized_ray(K, p_h) / ray_plane_inverse_depth(normalized_ray(K, p_h), omega_h)
        p_t = project(K, T_t_h.apply(X_h))
        q = H @ np.append(p_h, 1.0)
        assert np.allclose(q[:2] / q[2], p_t, atol=1e-8)


@pytest.mark.slow
def test_homography_warps_second_view_onto_first():
    """Warping each frame of a single-wall sequence into its predecessor reproduces it within one level."""
    scene = make_scene(build_preset(ScenePreset.SINGLE_WALL, K, num_frames=50))
    omega_w = scene.planes[0].plane
    u, v = np.meshgrid(np.arange(K.width, dtype=float), np.arange(K.height, dtype=float))
    host_px = np.stack([u, v, np.ones_like(u)], axis=-1)
    interior = (u >= 1) & (u <= K.width - 2) & (v >= 1) & (v <= K.height - 2)
    poses = scene.spec.poses
    for T_w_h, T_w_t in zip(poses, poses[1:]):
        host_image, host_depth = render_image(scene, T_w_h, K, quantize=False)
        target_image, target_depth = render_image(scene, T_w_t, K, quantize=False)
        T_h_w = T_w_h.inverse()
        H = compute_homography(T_w_t.inverse() @ T_w_h, transform_plane(T_h_w, omega_w), K)
        q = host_px @ H.T
        uv_t = q[..., :2] / q[..., 2:]
        u0, v0 = np.floor(uv_t[..., 0]), np.floor(uv_t[..., 1])
        inside = (q[..., 2] > 0) & (u0 >= 0) & (u0 <= K.width - 2) & (v0 >= 0) & (v0 <= K.height - 2)
        ui = np.where(inside, u0, 0).astype(int)
        vi = np.where(inside, v0, 0).astype(int)
        on_plane = (target_depth[vi, ui] > 0) & (target_depth[vi + 1, ui] > 0)
        on_plane &= (target_depth[vi, ui + 1] > 0) & (target_depth[vi + 1, ui + 1] > 0)
        mask = interior & (host_depth > 0) & inside & on_plane
        assert mask.mean() > 0.5

        warped = sample(target_image, uv_t)
        close = np.abs(warped - host_image)[mask] <= 1.0
        assert close.mean() >= 0.99
