"""Frame tracking, keyframe management and the point filter/associate lifecycle."""
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from common.errors import (
    DegeneratePlaneError,
    InitializationError,
    NoIntersectionError,
    OptimizationError,
    TrackingLostError,
)
from common.geometry import (
    CameraIntrinsics,
    PlaneCoeffs,
    Pose,
    box_plus,
    normalized_ray,
    project_points,
    ray_plane_inverse_depth,
    ray_plane_inverse_depths,
    transform_plane,
)
from common.image import ImagePyramid
from config.constants import PATCH_PATTERN, PATCH_RADIUS, KeyframeDecision, PointStatus
from config.settings import OptimizerConfig, RenderConfig, TrackerConfig
from localization.optimizer import (
    LevenbergMarquardt,
    LMResult,
    NormalEquations,
    marginalize_frame,
    merge_results,
    solve_window,
)
from localization.photometric import PatchEval, affine_pair, evaluate_patches
from localization.point_selector import select_candidates
from localization.state import FrameState, TrackedPoint, WindowState
from mapping.renderer import RenderedMaps, render
from mapping.surfel_map import SurfelMap

logger = logging.getLogger(__name__)

# Smallest/largest eigenvalue ratio of the pose Hessian accepted by tracking
MIN_HESSIAN_CONDITION = 1e-10
FINE_TRACE_SAMPLES = 9
DISTANCE_EPS = 1e-5


def theta(rho_a, rho_b):
    """Relative inverse-depth disagreement 1 - min/max, in [0, 1) for positive inputs."""
    rho_a = np.asarray(rho_a, dtype=float)
    rho_b = np.asarray(rho_b, dtype=float)
    return 1.0 - np.minimum(rho_a, rho_b) / np.maximum(rho_a, rho_b)


def map_resolution(surfel_map: SurfelMap) -> float:
    if surfel_map.voxel_size > 0:
        return surfel_map.voxel_size
    return float(np.mean(surfel_map.radii)) * math.sqrt(2.0)


def surfel_induced_inverse_depth(
    p_h: np.ndarray,
    omega_w: PlaneCoeffs,
    T_h_w: Pose,
    K: CameraIntrinsics,
    targets: Sequence[Pose] = (),
    near: float = 0.0,
    far: float = math.inf,
) -> Tuple[float, List[np.ndarray]]:
    """Inverse depth where the host ray of `p_h` meets `omega_w`, and its pixel in each target (T_t_w).

    Target pixels are NaN when the intersection lies behind that target.
    """
    xbar = normalized_ray(K, p_h)
    omega_h = transform_plane(T_h_w, omega_w)
    try:
        rho = ray_plane_inverse_depth(xbar, omega_h)
    except DegeneratePlaneError as e:
        raise NoIntersectionError(str(e)) from e
    if not near <= 1.0 / rho <= far:
        raise NoIntersectionError(f"Intersection depth {1.0 / rho:.3f} outside [{near}, {far}]")
    X_w = T_h_w.inverse().apply(xbar / rho)
    pixels = [project_points(K, T_t_w.apply(X_w))[0] for T_t_w in targets]
    return rho, pixels


def _host_planes(kf: FrameState, normals_w: np.ndarray, d_w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    n_h = normals_w @ kf.T_c_w.rotation.T
    return n_h, d_w - n_h @ kf.T_c_w.translation


def _point_inv_depths(kf: FrameState, points: List[TrackedPoint], rays: np.ndarray) -> np.ndarray:
    """Current inverse depth per point: plane-induced when associated, estimated otherwise."""
    rho = np.array([p.inv_depth for p in points])
    assoc = np.array([p.is_associated for p in points])
    if assoc.any():
        normals = np.array([p.plane.normal for p in points if p.is_associated])
        d = np.array([p.plane.d for p in points if p.is_associated])
        n_h, d_h = _host_planes(kf, normals, d)
        rho[assoc] = ray_plane_inverse_depths(rays[assoc], n_h, d_h)
    return rho


def reference_depths(window: WindowState, include_candidates: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Semi-dense depth of the last keyframe: live points of every keyframe projected into it.

    Associated points contribute their plane-induced depth. Seeded candidates
    of the last keyframe are included when `include_candidates` is set.
    """
    K = window.K
    last = window.last_keyframe
    all_pixels, all_rho = [], []
    for kf in window.keyframes:
        points = window.points_with(PointStatus.ACTIVE, PointStatus.ASSOCIATED, host_id=kf.frame_id)
        if include_candidates and kf is last:
            points += [p for p in window.points_with(PointStatus.CANDIDATE, host_id=kf.frame_id) if p.seeded]
        if not points:
            continue
        pixels = np.array([p.pixel for p in points])
        rays = normalized_ray(K, pixels)
        rho = _point_inv_depths(kf, points, rays)
        ok = np.isfinite(rho) & (rho > 0)
        if kf is last:
            all_pixels.append(pixels[ok])
            all_rho.append(rho[ok])
            continue
        X_l = (last.T_c_w @ kf.T_w_c).apply(rays[ok] / rho[ok, None])
        uv, in_front = project_points(K, X_l)
        inside = in_front & K.contains(np.nan_to_num(uv, nan=-1.0), margin=PATCH_RADIUS + 1)
        all_pixels.append(uv[inside])
        all_rho.append(1.0 / X_l[inside, 2])
    if not all_pixels:
        return np.empty((0, 2)), np.empty(0)
    return np.concatenate(all_pixels), np.concatenate(all_rho)


class TrackingProblem:
    """Direct alignment of one frame (pose, a, b) against a fixed reference keyframe."""

    def __init__(
        self,
        host: FrameState,
        frame: FrameState,
        K: CameraIntrinsics,
        pixels: np.ndarray,
        inv_depths: np.ndarray,
        level: int,
        config: TrackerConfig,
        affine_prior: Tuple[float, float] = (0.0, 0.0),
    ):
        self.host = host
        self.frame = frame
        self.K = K
        self.pixels = pixels
        self.inv_depths = inv_depths
        self.level = level
        self.config = config
        self.affine_prior = affine_prior
        self._backup = None

    def evaluate(self, jacobians: bool) -> PatchEval:
        return evaluate_patches(
            self.host,
            self.frame,
            self.K,
            self.pixels,
            inv_depths=self.inv_depths,
            level=self.level,
            gamma=self.config.huber_gamma,
            gradient_c=self.config.gradient_weight_c,
            jacobians=jacobians,
        )

    def _prior_energy(self) -> float:
        lam_a, lam_b = self.affine_prior
        return lam_a * self.frame.a**2 + lam_b * self.frame.b**2

    def linearize(self) -> NormalEquations:
        ev = self.evaluate(jacobians=True)
        J, W, r = ev.J_target, ev.weights, ev.residuals
        H = np.einsum("npi,np,npj->ij", J, W, J)
        b = np.einsum("npi,np,np->i", J, W, r)
        lam_a, lam_b = self.affine_prior
        H[6, 6] += lam_a
        H[7, 7] += lam_b
        b[6] += lam_a * self.frame.a
        b[7] += lam_b * self.frame.b
        return NormalEquations.from_dense(H, b, float(ev.energy.sum()) + self._prior_energy())

    def energy(self) -> float:
        return float(self.evaluate(jacobians=False).energy.sum()) + self._prior_energy()

    def apply_step(self, step: np.ndarray) -> None:
        self.frame.T_c_w = box_plus(self.frame.T_c_w, step[:6])
        self.frame.a += float(step[6])
        self.frame.b += float(step[7])

    def backup(self) -> None:
        self._backup = (self.frame.T_c_w, self.frame.a, self.frame.b)

    def restore(self) -> None:
        self.frame.T_c_w, self.frame.a, self.frame.b = self._backup


@dataclass
class TrackingResult:
    frame: FrameState
    rmse: float
    tracked_fraction: float
    iterations: int
    pixels: np.ndarray
    inv_depths: np.ndarray


def _alignment_failure(problem: TrackingProblem, config: TrackerConfig) -> Tuple[Optional[str], float, float]:
    """(reason or None, rmse, tracked fraction) at the finest level."""
    ne = problem.linearize()
    ev = problem.evaluate(jacobians=False)
    n_valid = int(ev.valid.sum())
    fraction = n_valid / max(len(problem.pixels), 1)
    rmse = math.sqrt(float((ev.residuals[ev.valid] ** 2).mean())) if n_valid else math.inf
    eigs = np.linalg.eigvalsh(ne.H_ff[:6, :6])
    if eigs[-1] <= 0 or eigs[0] / eigs[-1] < MIN_HESSIAN_CONDITION:
        return "pose Hessian is singular (textureless input)", rmse, fraction
    if fraction < config.min_tracked_fraction:
        return f"only {fraction:.0%} of reference points in view", rmse, fraction
    if rmse > config.tracking_lost_rmse:
        return f"residual RMSE {rmse:.1f} above {config.tracking_lost_rmse}", rmse, fraction
    return None, rmse, fraction


def align_frame(
    host: FrameState,
    frame: FrameState,
    K: CameraIntrinsics,
    pixels: np.ndarray,
    inv_depths: np.ndarray,
    config: TrackerConfig,
    optimizer_config: OptimizerConfig,
) -> Tuple[Optional[str], float, float, int]:
    """Coarse-to-fine alignment of `frame` in place; returns (failure reason, rmse, fraction, iterations)."""
    lm = LevenbergMarquardt(
        optimizer_config.initial_damping,
        config.tracking_max_iterations,
        optimizer_config.step_tolerance,
        optimizer_config.energy_tolerance,
    )
    prior = (optimizer_config.affine_prior_a, optimizer_config.affine_prior_b)
    iterations = 0
    problem = None
    for level in reversed(range(config.pyramid_levels)):
        problem = TrackingProblem(host, frame, K, pixels, inv_depths, level, config, prior)
        try:
            iterations += lm.solve(problem).iterations
        except OptimizationError as e:
            return f"optimization failed at level {level}: {e}", math.inf, 0.0, iterations
    reason, rmse, fraction = _alignment_failure(problem, config)
    return reason, rmse, fraction, iterations


def keyframe_decision(
    window: WindowState,
    frame: FrameState,
    pixels: np.ndarray,
    inv_depths: np.ndarray,
    config: Optional[TrackerConfig] = None,
) -> Tuple[KeyframeDecision, float]:
    """Flow- and brightness-based keyframe test against the last keyframe; returns (decision, score)."""
    config = config or TrackerConfig()
    K = window.K
    last = window.last_keyframe
    if len(pixels) == 0:
        return KeyframeDecision.NEW_KEYFRAME, math.inf
    T_f_l = frame.T_c_w @ last.T_w_c
    X = normalized_ray(K, pixels) / np.asarray(inv_depths)[:, None]
    uv_t, ok_t = project_points(K, X + T_f_l.translation)
    uv_rt, ok_rt = project_points(K, T_f_l.apply(X))
    ok = ok_t & ok_rt
    if not ok.any():
        return KeyframeDecision.NEW_KEYFRAME, math.inf
    flow_t = math.sqrt(float(np.mean(np.sum((uv_t[ok] - pixels[ok]) ** 2, axis=1))))
    flow_rt = math.sqrt(float(np.mean(np.sum((uv_rt[ok] - pixels[ok]) ** 2, axis=1))))
    a_th, _ = affine_pair(last, frame)
    size = K.width + K.height
    score = (
        flow_t / (config.kf_flow_fraction_t * size)
        + flow_rt / (config.kf_flow_fraction_rt * size)
        + config.kf_affine_weight * abs(math.log(a_th))
    )
    decision = KeyframeDecision.NEW_KEYFRAME if score > 1.0 else KeyframeDecision.KEEP
    return decision, score


def _visible_fraction(window: WindowState, kf: FrameState, target: FrameState) -> float:
    points = window.points_with(PointStatus.ACTIVE, PointStatus.ASSOCIATED, host_id=kf.frame_id)
    if not points:
        return 0.0
    pixels = np.array([p.pixel for p in points])
    rays = normalized_ray(window.K, pixels)
    rho = _point_inv_depths(kf, points, rays)
    ok = np.isfinite(rho) & (rho > 0)
    X_t = (target.T_c_w @ kf.T_w_c).apply(rays[ok] / rho[ok, None])
    uv, in_front = project_points(window.K, X_t)
    visible = in_front & window.K.contains(np.nan_to_num(uv, nan=-1.0))
    return float(visible.sum()) / len(points)


def select_marginalization(window: WindowState, config: Optional[TrackerConfig] = None) -> int:
    """Keyframe to drop from a full window (never the newest one).

    Frames with few points visible in the newest keyframe or a large
    brightness change go first; otherwise the distance score favours keeping
    frames that are close to the newest and spread out among themselves.
    """
    config = config or TrackerConfig()
    latest = window.last_keyframe
    older = window.keyframes[:-1]
    for kf in older:
        visible = _visible_fraction(window, kf, latest)
        a_th, _ = affine_pair(kf, latest)
        if visible < config.marg_visible_fraction or abs(math.log(a_th)) > config.marg_affine_threshold:
            logger.info(f"Keyframe #{kf.frame_id}: selected for marginalization (visible {visible:.0%}, a {a_th:.2f})")
            return kf.frame_id

    centers = np.array([kf.T_w_c.translation for kf in older])
    to_latest = np.linalg.norm(centers - latest.T_w_c.translation, axis=1)
    pairwise = np.linalg.norm(centers[:, None] - centers[None], axis=2)
    inv = 1.0 / (pairwise + DISTANCE_EPS)
    np.fill_diagonal(inv, 0.0)
    scores = np.sqrt(to_latest) * inv.sum(axis=1)
    return older[int(np.argmax(scores))].frame_id


def seed_candidates(
    window: WindowState,
    frame: FrameState,
    maps: RenderedMaps,
    resolution: float,
    config: TrackerConfig,
) -> List[TrackedPoint]:
    """Select candidates in `frame` and seed their depth from the rendered depth map where valid."""
    pixels = select_candidates(
        frame.pyramid.image, config.candidate_density, config.grad_block_size, config.grad_threshold_add
    )
    depths = maps.depths_at(pixels) if len(pixels) else np.empty(0)
    default_rho = 0.5 * (1.0 / config.trace_min_depth + 1.0 / config.trace_max_depth)
    points = []
    for pixel, depth in zip(pixels, depths):
        if np.isfinite(depth) and depth > 0:
            points.append(
                window.add_point(
                    host_id=frame.frame_id,
                    pixel=pixel,
                    inv_depth=1.0 / depth,
                    inv_depth_sigma=resolution / depth**2,
                    seeded=True,
                )
            )
        else:
            points.append(
                window.add_point(host_id=frame.frame_id, pixel=pixel, inv_depth=default_rho, inv_depth_sigma=math.inf)
            )
    n_seeded = sum(p.seeded for p in points)
    logger.info(f"Keyframe #{frame.frame_id}: {len(points)} candidates, {n_seeded} seeded from the map")
    return points


def filter_and_associate(
    window: WindowState, maps: RenderedMaps, config: Optional[TrackerConfig] = None
) -> Dict[str, int]:
    """Classify active points against the surfels seen by the last keyframe.

    A point is an outlier when its projections with the estimated and the
    plane-induced depth differ by the outlier pixel distance in some
    keyframe, or their inverse depths disagree by the outlier theta; it is
    associated when both measures are below the association thresholds.
    Points with no live observation in another keyframe keep their status,
    so the classification is meant to run on optimized depths.
    Associated points whose surfel changed in a later render are re-associated.
    """
    config = config or TrackerConfig()
    counts: Counter = Counter()
    for kf in window.keyframes:
        active = window.points_with(PointStatus.ACTIVE, host_id=kf.frame_id)
        if active:
            _filter_active(window, kf, active, maps, config, counts)
        associated = window.points_with(PointStatus.ASSOCIATED, host_id=kf.frame_id)
        if associated:
            _reassociate(window, kf, associated, maps, config, counts)
    if counts:
        logger.info(
            f"Keyframe #{window.last_keyframe.frame_id}: associated {counts['associated']}, "
            f"outliers {counts['outlier']}, re-associated {counts['reassociated']}"
        )
    return dict(counts)


def _filter_active(
    window: WindowState,
    kf: FrameState,
    points: List[TrackedPoint],
    maps: RenderedMaps,
    config: TrackerConfig,
    counts: Counter,
) -> None:
    K = window.K
    last = window.last_keyframe
    rays = normalized_ray(K, np.array([p.pixel for p in points]))
    rho_est = np.array([p.inv_depth for p in points])
    X_h = rays / rho_est[:, None]
    uv_l, _ = project_points(K, (last.T_c_w @ kf.T_w_c).apply(X_h))
    normals_w, d_w, found = maps.planes_at(uv_l)
    n_h, d_h = _host_planes(kf, np.nan_to_num(normals_w), np.nan_to_num(d_w))
    rho_plane = ray_plane_inverse_depths(rays, n_h, d_h)
    found &= np.isfinite(rho_plane)
    rho_plane = np.where(found, rho_plane, rho_est)

    th = theta(rho_est, rho_plane)
    dist = np.zeros(len(points))
    observed = np.zeros(len(points), dtype=bool)
    X_plane = rays / rho_plane[:, None]
    for target in window.keyframes:
        if target.frame_id == kf.frame_id:
            continue
        live = np.array([target.frame_id not in p.dropped_targets for p in points], dtype=bool)
        T_t_h = target.T_c_w @ kf.T_w_c
        uv_est, _ = project_points(K, T_t_h.apply(X_h))
        uv_plane, _ = project_points(K, T_t_h.apply(X_plane))
        dist = np.where(live, np.fmax(dist, np.linalg.norm(uv_est - uv_plane, axis=1)), dist)
        observed |= live

    # Depths not yet constrained by any target image stay undecided
    found &= observed
    outlier = found & ((dist >= config.outlier_pixel_dist) | (th >= config.outlier_theta))
    associate = found & ~outlier & (dist < config.associate_pixel_dist) & (th < config.associate_theta)
    for i, p in enumerate(points):
        if outlier[i]:
            p.set_status(PointStatus.OUTLIER)
            counts["outlier"] += 1
        elif associate[i]:
            p.inv_depth = float(rho_plane[i])
            p.associate(PlaneCoeffs(normals_w[i], d_w[i]))
            counts["associated"] += 1


def _reassociate(
    window: WindowState,
    kf: FrameState,
    points: List[TrackedPoint],
    maps: RenderedMaps,
    config: TrackerConfig,
    counts: Counter,
) -> None:
    K = window.K
    last = window.last_keyframe
    rays = normalized_ray(K, np.array([p.pixel for p in points]))
    rho = _point_inv_depths(kf, points, rays)
    usable = np.isfinite(rho) & (rho > 0)
    X_h = rays / np.where(usable, rho, 1.0)[:, None]
    uv_l, _ = project_points(K, (last.T_c_w @ kf.T_w_c).apply(X_h))
    uv_l[~usable] = np.nan
    normals_new, d_new, found = maps.planes_at(uv_l)
    radii = maps.radii_at(uv_l)
    X_w = kf.T_w_c.apply(X_h)
    normals_old = np.array([p.plane.normal for p in points])
    cos = np.clip(np.einsum("ni,ni->n", normals_old, np.nan_to_num(normals_new)), -1.0, 1.0)
    angle = np.degrees(np.arccos(cos))
    offset = np.abs(np.einsum("ni,ni->n", np.nan_to_num(normals_new), X_w) + np.nan_to_num(d_new))
    changed = found & (
        (angle > config.reassociate_angle_deg) | (offset > config.reassociate_radius_factor * np.nan_to_num(radii))
    )
    for i in np.flatnonzero(changed):
        p = points[i]
        logger.debug(f"Point #{p.point_id}: re-associated ({angle[i]:.1f} deg, offset {offset[i]:.3f} m)")
        p.plane = PlaneCoeffs(normals_new[i], d_new[i])
        counts["reassociated"] += 1


def trace_candidates(window: WindowState, frame: FrameState, config: Optional[TrackerConfig] = None) -> int:
    """Epipolar inverse-depth search for candidates of every keyframe in `frame`; returns the traced count."""
    config = config or TrackerConfig()
    traced = 0
    for kf in window.keyframes:
        candidates = window.points_with(PointStatus.CANDIDATE, host_id=kf.frame_id)
        if candidates:
            traced += _trace_host(window, kf, frame, candidates, config)
    if traced:
        logger.debug(f"Frame #{frame.frame_id}: traced {traced} candidates")
    return traced


def _search_errors(
    kf: FrameState, frame: FrameState, K: CameraIntrinsics, pixels: np.ndarray, rhos: np.ndarray, config: TrackerConfig
) -> np.ndarray:
    """RMS-like robust patch error per (candidate, sample); inf where the warp leaves the image."""
    n, s = rhos.shape
    ev = evaluate_patches(
        kf,
        frame,
        K,
        np.repeat(pixels, s, axis=0),
        inv_depths=rhos.ravel(),
        gamma=config.huber_gamma,
        gradient_c=config.gradient_weight_c,
        jacobians=False,
    )
    err = np.sqrt(ev.energy / len(PATCH_PATTERN))
    return np.where(ev.valid, err, np.inf).reshape(n, s)


def _trace_host(
    window: WindowState, kf: FrameState, frame: FrameState, candidates: List[TrackedPoint], config: TrackerConfig
) -> int:
    K = window.K
    pixels = np.array([p.pixel for p in candidates])
    rho = np.array([p.inv_depth for p in candidates])
    sigma = np.array([p.inv_depth_sigma for p in candidates])
    seeded = np.array([p.seeded for p in candidates])
    rho_min, rho_max = 1.0 / config.trace_max_depth, 1.0 / config.trace_min_depth
    lo = np.where(seeded, np.maximum(rho - 3.0 * np.where(seeded, sigma, 0.0), rho_min), rho_min)
    hi = np.where(seeded, np.minimum(rho + 3.0 * np.where(seeded, sigma, 0.0), rho_max), rho_max)
    hi = np.maximum(hi, lo)

    rays = normalized_ray(K, pixels)
    T_f_h = frame.T_c_w @ kf.T_w_c
    uv_lo, ok_lo = project_points(K, T_f_h.apply(rays / lo[:, None]))
    uv_hi, ok_hi = project_points(K, T_f_h.apply(rays / hi[:, None]))
    length = np.where(ok_lo & ok_hi, np.linalg.norm(uv_hi - uv_lo, axis=1), 0.0)
    todo = np.flatnonzero(length >= config.trace_min_baseline_px)
    if len(todo) == 0:
        return 0

    n_samples = config.trace_samples
    steps = np.linspace(0.0, 1.0, n_samples)
    coarse = lo[todo, None] + (hi - lo)[todo, None] * steps[None]
    err = _search_errors(kf, frame, K, pixels[todo], coarse, config)
    best = np.argmin(err, axis=1)
    best_err = err[np.arange(len(todo)), best]
    neighbourhood = np.abs(np.arange(n_samples)[None] - best[:, None]) <= 1
    second = np.where(neighbourhood, np.inf, err).min(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        uniqueness = np.where(best_err > 0, second / best_err, np.where(np.isfinite(second) & (second > 0), np.inf, 0.0))

    spacing = (hi - lo)[todo] / max(n_samples - 1, 1)
    fine = coarse[np.arange(len(todo)), best][:, None] + spacing[:, None] * np.linspace(-1.0, 1.0, FINE_TRACE_SAMPLES)[None]
    fine = np.clip(fine, rho_min, rho_max)
    fine_err = _search_errors(kf, frame, K, pixels[todo], fine, config)
    fine_best = np.argmin(fine_err, axis=1)
    refined = fine[np.arange(len(todo)), fine_best]
    refined_err = fine_err[np.arange(len(todo)), fine_best]

    accepted = (
        np.isfinite(refined_err)
        & (np.minimum(refined_err, best_err) < config.trace_max_error)
        & (uniqueness > config.trace_uniqueness)
    )
    for k in np.flatnonzero(accepted):
        p = candidates[todo[k]]
        p.inv_depth = float(refined[k])
        p.inv_depth_sigma = float(spacing[k] * 2.0 / (FINE_TRACE_SAMPLES - 1))
        p.traced = True
    return int(accepted.sum())


def activate_points(window: WindowState, config: Optional[TrackerConfig] = None) -> int:
    """Promote seeded or traced candidates of older keyframes that the newest keyframe sees, most certain first."""
    config = config or TrackerConfig()
    latest = window.last_keyframe
    budget = config.max_active_points - len(window.points_with(PointStatus.ACTIVE, PointStatus.ASSOCIATED))
    if budget <= 0:
        return 0
    candidates = [
        p
        for p in window.points_with(PointStatus.CANDIDATE)
        if p.host_id != latest.frame_id and (p.seeded or p.traced)
    ]
    candidates.sort(key=lambda p: (p.inv_depth_sigma, p.point_id))
    activated = 0
    for p in candidates:
        if activated >= budget:
            break
        kf = window.frame(p.host_id)
        X_l = (latest.T_c_w @ kf.T_w_c).apply(normalized_ray(window.K, p.pixel)[None] / p.inv_depth)
        uv, in_front = project_points(window.K, X_l)
        if in_front[0] and window.K.contains(uv[0], margin=PATCH_RADIUS + 1):
            p.set_status(PointStatus.ACTIVE)
            activated += 1
    if activated:
        logger.info(f"Keyframe #{latest.frame_id}: activated {activated} points")
    return activated


def constraint_counts(window: WindowState) -> Tuple[int, int]:
    """(surfel residual blocks, all residual blocks) in the window."""
    ids = [kf.frame_id for kf in window.keyframes]
    surfel = total = 0
    for p in window.points_with(PointStatus.ACTIVE, PointStatus.ASSOCIATED):
        n = sum(1 for fid in ids if fid != p.host_id and fid not in p.dropped_targets)
        total += n
        if p.is_associated:
            surfel += n
    return surfel, total


def initialize(
    image: np.ndarray,
    initial_pose: Pose,
    surfel_map: SurfelMap,
    K: CameraIntrinsics,
    config: Optional[TrackerConfig] = None,
    render_config: Optional[RenderConfig] = None,
    frame_id: int = 0,
    timestamp: float = 0.0,
    exposure_time: float = 1.0,
) -> WindowState:
    """First keyframe at `initial_pose` (T_w_c) with candidates seeded from the rendered depth map.

    Seeded points start active; association waits for a second keyframe.
    """
    config = config or TrackerConfig()
    pyramid = ImagePyramid.from_image(image, config.pyramid_levels)
    frame = FrameState(frame_id, pyramid, initial_pose.inverse(), exposure_time, timestamp=timestamp)
    window = WindowState(K, max_keyframes=config.window_size, keyframes=[frame])
    maps = render(surfel_map, initial_pose, K, render_config)

    points = seed_candidates(window, frame, maps, map_resolution(surfel_map), config)
    if not points:
        raise InitializationError(f"Frame #{frame_id}: no candidate pixels in the first image")
    coverage = sum(p.seeded for p in points) / len(points)
    if coverage < config.init_min_coverage:
        raise InitializationError(
            f"Frame #{frame_id}: rendered depth covers {coverage:.0%} of candidates, "
            f"need {config.init_min_coverage:.0%}"
        )

    seeded = sorted((p for p in points if p.seeded), key=lambda p: (p.inv_depth_sigma, p.point_id))
    for p in seeded[: config.max_active_points]:
        p.set_status(PointStatus.ACTIVE)
    logger.info(f"Frame #{frame_id}: initialized with {len(seeded)} seeded points, coverage {coverage:.0%}")
    return window


@dataclass
class FrameRecord:
    """Pose of a frame relative to its reference keyframe (T_f_ref)."""

    frame_id: int
    timestamp: float
    ref_kf_id: int
    T_f_ref: Pose
    is_keyframe: bool = False


@dataclass
class KeyframeUpdate:
    keyframe_id: int
    marginalized_id: Optional[int]
    solve: LMResult
    status_counts: Dict[str, int] = field(default_factory=dict)
    surfel_constraints: int = 0
    total_constraints: int = 0

    @property
    def constraint_ratio(self) -> float:
        return self.surfel_constraints / self.total_constraints if self.total_constraints else 0.0


class Frontend:
    """Single-session state machine: initialize, then track frames and manage keyframes."""

    def __init__(
        self,
        surfel_map: SurfelMap,
        K: CameraIntrinsics,
        tracker_config: Optional[TrackerConfig] = None,
        optimizer_config: Optional[OptimizerConfig] = None,
        render_config: Optional[RenderConfig] = None,
    ):
        self.surfel_map = surfel_map
        self.K = K
        self.config = tracker_config or TrackerConfig()
        self.optimizer_config = optimizer_config or OptimizerConfig(window_size=self.config.window_size)
        self.render_config = render_config or RenderConfig()
        self.window: Optional[WindowState] = None
        self.records: List[FrameRecord] = []
        self.keyframe_poses: Dict[int, Pose] = {}
        self._last_T_c_w: Optional[Pose] = None
        self._prev_T_c_w: Optional[Pose] = None

    def start(self, image: np.ndarray, initial_pose: Pose, frame_id: int = 0, timestamp: float = 0.0, exposure_time: float = 1.0) -> WindowState:
        self.window = initialize(
            image, initial_pose, self.surfel_map, self.K, self.config, self.render_config, frame_id, timestamp, exposure_time
        )
        kf = self.window.last_keyframe
        self.keyframe_poses[frame_id] = kf.T_c_w
        self.records.append(FrameRecord(frame_id, timestamp, frame_id, Pose.identity(), is_keyframe=True))
        self._last_T_c_w = kf.T_c_w
        return self.window

    def _guesses(self) -> List[Tuple[str, Pose]]:
        if self._prev_T_c_w is None:
            return [("zero-motion", self._last_T_c_w)]
        velocity = self._last_T_c_w @ self._prev_T_c_w.inverse()
        return [("constant-velocity", velocity @ self._last_T_c_w), ("zero-motion", self._last_T_c_w)]

    def track_frame(self, image: np.ndarray, frame_id: int, timestamp: float = 0.0, exposure_time: float = 1.0) -> TrackingResult:
        """Align a new image against the last keyframe; raises TrackingLostError when every guess fails."""
        if self.window is None:
            raise InitializationError("Frontend is not initialized")
        last = self.window.last_keyframe
        pyramid = ImagePyramid.from_image(image, self.config.pyramid_levels)
        pixels, inv_depths = reference_depths(self.window)
        if len(pixels) == 0:
            raise TrackingLostError("no reference points", frame_index=frame_id)

        reason = None
        for name, guess in self._guesses():
            frame = FrameState(frame_id, pyramid, guess, exposure_time, a=last.a, b=last.b, timestamp=timestamp)
            reason, rmse, fraction, iterations = align_frame(
                last, frame, self.K, pixels, inv_depths, self.config, self.optimizer_config
            )
            if reason is None:
                self._prev_T_c_w, self._last_T_c_w = self._last_T_c_w, frame.T_c_w
                logger.debug(f"Frame #{frame_id}: tracked from {name} guess, RMSE {rmse:.2f}, {fraction:.0%} in view")
                return TrackingResult(frame, rmse, fraction, iterations, pixels, inv_depths)
            logger.warning(f"Frame #{frame_id}: tracking from {name} guess failed ({reason})")
        raise TrackingLostError(f"tracking lost ({reason})", frame_index=frame_id)

    def add_keyframe(self, frame: FrameState) -> KeyframeUpdate:
        window = self.window
        marginalized = None
        if len(window.keyframes) >= window.max_keyframes:
            marginalized = select_marginalization(window, self.config)
            marginalize_frame(window, marginalized, self.optimizer_config)
        window.keyframes.append(frame)

        activate_points(window, self.config)
        result = solve_window(window, self.optimizer_config)
        maps = render(self.surfel_map, frame.T_w_c, self.K, self.render_config)
        counts = filter_and_associate(window, maps, self.config)
        if counts.get("associated") or counts.get("outlier"):
            result = merge_results(result, solve_window(window, self.optimizer_config))
            maps = render(self.surfel_map, frame.T_w_c, self.K, self.render_config)
        seed_candidates(window, frame, maps, map_resolution(self.surfel_map), self.config)

        for kf in window.keyframes:
            self.keyframe_poses[kf.frame_id] = kf.T_c_w
        self._last_T_c_w = frame.T_c_w
        window.check_invariants()
        surfel, total = constraint_counts(window)
        logger.info(
            f"Keyframe #{frame.frame_id}: window of {len(window.keyframes)}, "
            f"surfel constraints {surfel}/{total}"
        )
        return KeyframeUpdate(frame.frame_id, marginalized, result, counts, surfel, total)

    def process(
        self, image: np.ndarray, frame_id: int, timestamp: float = 0.0, exposure_time: float = 1.0
    ) -> Tuple[FrameRecord, Optional[KeyframeUpdate]]:
        """Track one frame, refine candidate depths with it and add it as a keyframe when needed."""
        tracked = self.track_frame(image, frame_id, timestamp, exposure_time)
        frame = tracked.frame
        last = self.window.last_keyframe
        trace_candidates(self.window, frame, self.config)
        decision, score = keyframe_decision(self.window, frame, tracked.pixels, tracked.inv_depths, self.config)
        if decision == KeyframeDecision.NEW_KEYFRAME:
            logger.debug(f"Frame #{frame_id}: keyframe score {score:.2f}")
            update = self.add_keyframe(frame)
            record = FrameRecord(frame_id, timestamp, frame_id, Pose.identity(), is_keyframe=True)
        else:
            update = None
            record = FrameRecord(frame_id, timestamp, last.frame_id, frame.T_c_w @ last.T_w_c)
        self.records.append(record)
        return record, update

    def trajectory(self) -> List[Tuple[float, Pose]]:
        """(timestamp, T_w_c) of every processed frame using the latest keyframe estimates."""
        poses = []
        for record in self.records:
            T_c_w = record.T_f_ref @ self.keyframe_poses[record.ref_kf_id]
            poses.append((record.timestamp, T_c_w.inverse()))
        return poses
