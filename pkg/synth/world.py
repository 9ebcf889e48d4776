"""Procedural planar scenes with exact ray-cast rendering."""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from common.errors import SceneError
from common.geometry import CameraIntrinsics, PlaneCoeffs, Pose, normalized_ray, so3_exp
from mapping.surfel_map import SurfelMap, estimate_normals_pca, surfel_radius

logger = logging.getLogger(__name__)

BACKGROUND = 0.0
BASE_RADIANCE = 128.0
TEXTURE_AMPLITUDE = 100.0
TEXTURE_COMPONENTS = 8
MIN_WAVELENGTH = 0.8
MAX_WAVELENGTH = 3.0
GEOMETRY_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class PlaneSpec:
    """Rectangle origin + s * axis_u + t * axis_v, s in [0, extent_u], t in [0, extent_v].

    The plane normal points to the side the scene is viewed from.
    """

    plane: PlaneCoeffs
    origin: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    extent_u: float
    extent_v: float
    texture_seed: int = 0

    @classmethod
    def rectangle(
        cls,
        origin: Sequence[float],
        axis_u: Sequence[float],
        axis_v: Sequence[float],
        extent_u: float,
        extent_v: float,
        normal: Sequence[float],
        texture_seed: int = 0,
    ) -> "PlaneSpec":
        origin = np.asarray(origin, dtype=float)
        return cls(
            PlaneCoeffs.from_point_normal(origin, normal),
            origin,
            np.asarray(axis_u, dtype=float),
            np.asarray(axis_v, dtype=float),
            float(extent_u),
            float(extent_v),
            texture_seed,
        )

    def validate(self) -> None:
        if not (self.extent_u > 0 and self.extent_v > 0):
            raise SceneError(f"Plane extents must be positive, got {self.extent_u} x {self.extent_v}")
        n = self.plane.normal
        for name, axis in (("axis_u", self.axis_u), ("axis_v", self.axis_v)):
            if abs(np.linalg.norm(axis) - 1.0) > 1e-9 or abs(axis @ n) > 1e-9:
                raise SceneError(f"{name} must be a unit vector inside the plane")
        if abs(self.axis_u @ self.axis_v) > 1e-9:
            raise SceneError("Plane axes must be orthogonal")
        if abs(self.plane.signed_distance(self.origin)) > 1e-9:
            raise SceneError("Plane origin does not lie on the plane")

    def local(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        offset = points - self.origin
        return offset @ self.axis_u, offset @ self.axis_v

    def corners(self) -> np.ndarray:
        u, v = self.axis_u * self.extent_u, self.axis_v * self.extent_v
        return np.array([self.origin, self.origin + u, self.origin + u + v, self.origin + v])


@dataclass(frozen=True, eq=False)
class Texture:
    """Band-limited random field: base + sum of cosines with wavelengths in [0.8, 3] m."""

    directions: np.ndarray
    frequencies: np.ndarray
    phases: np.ndarray
    amplitudes: np.ndarray

    @classmethod
    def from_seed(cls, seed: int, components: int = TEXTURE_COMPONENTS) -> "Texture":
        rng = np.random.default_rng(seed)
        angles = rng.uniform(0.0, math.pi, components)
        wavelengths = rng.uniform(MIN_WAVELENGTH, MAX_WAVELENGTH, components)
        amplitudes = rng.uniform(0.5, 1.0, components)
        amplitudes *= TEXTURE_AMPLITUDE / amplitudes.sum()
        return cls(
            directions=np.stack([np.cos(angles), np.sin(angles)], axis=1),
            frequencies=1.0 / wavelengths,
            phases=rng.uniform(0.0, 2.0 * math.pi, components),
            amplitudes=amplitudes,
        )

    def __call__(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        proj = s[..., None] * self.directions[:, 0] + t[..., None] * self.directions[:, 1]
        return BASE_RADIANCE + np.sum(self.amplitudes * np.cos(2.0 * math.pi * self.frequencies * proj + self.phases), axis=-1)


@dataclass(eq=False)
class SceneSpec:
    """Planes, ground-truth camera poses (T_w_c) and per-frame exposure (t, a, b)."""

    planes: List[PlaneSpec]
    K: CameraIntrinsics
    poses: List[Pose] = field(default_factory=list)
    timestamps: List[float] = field(default_factory=list)
    exposures: List[Tuple[float, float, float]] = field(default_factory=list)
    name: str = "custom"

    def __post_init__(self):
        if not self.exposures:
            self.exposures = [(1.0, 0.0, 0.0)] * len(self.poses)
        if not (len(self.poses) == len(self.timestamps) == len(self.exposures)):
            raise SceneError("Poses, timestamps and exposures differ in length")


@dataclass(frozen=True, eq=False)
class Scene:
    spec: SceneSpec
    textures: Tuple[Texture, ...]

    @property
    def planes(self) -> List[PlaneSpec]:
        return self.spec.planes


def _coincident_overlap(a: PlaneSpec, b: PlaneSpec) -> bool:
    same = abs(abs(a.plane.normal @ b.plane.normal) - 1.0) < 1e-9
    if not same:
        return False
    sign = 1.0 if a.plane.normal @ b.plane.normal > 0 else -1.0
    if abs(a.plane.d - sign * b.plane.d) > 1e-9:
        return False
    s, t = a.local(b.corners())
    return s.max() > GEOMETRY_EPS and s.min() < a.extent_u - GEOMETRY_EPS and t.max() > GEOMETRY_EPS and t.min() < a.extent_v - GEOMETRY_EPS


def make_scene(spec: SceneSpec) -> Scene:
    """Validate planes and build their textures (deterministic in the texture seeds)."""
    if not spec.planes:
        raise SceneError("Scene has no planes")
    for plane in spec.planes:
        plane.validate()
    for i, a in enumerate(spec.planes):
        for j in range(i + 1, len(spec.planes)):
            if _coincident_overlap(a, spec.planes[j]):
                raise SceneError(f"Planes {i} and {j} are coincident and overlap")
    scene = Scene(spec, tuple(Texture.from_seed(p.texture_seed) for p in spec.planes))
    logger.info(f"Scene '{spec.name}': {len(spec.planes)} planes, {len(spec.poses)} poses")
    return scene


def cast_rays(scene: Scene, T_w_c: Pose, K: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest plane hit per pixel: (depth, plane index, world point); depth 0 and index -1 for background."""
    u, v = np.meshgrid(np.arange(K.width, dtype=float), np.arange(K.height, dtype=float))
    xbar = normalized_ray(K, np.stack([u, v], axis=-1))
    dirs = xbar @ T_w_c.rotation.T
    center = T_w_c.translation

    depth = np.full((K.height, K.width), np.inf)
    index = np.full((K.height, K.width), -1, dtype=np.int64)
    for i, plane in enumerate(scene.planes):
        n, d = plane.plane.normal, plane.plane.d
        denom = dirs @ n
        usable = np.abs(denom) > GEOMETRY_EPS
        s = np.where(usable, -(n @ center + d) / np.where(usable, denom, 1.0), np.inf)
        hit = usable & (s > GEOMETRY_EPS)
        points = center + dirs * np.where(hit, s, 0.0)[..., None]
        lu, lv = plane.local(points)
        hit &= (lu >= 0) & (lu <= plane.extent_u) & (lv >= 0) & (lv <= plane.extent_v)
        closer = hit & (s < depth)
        depth[closer] = s[closer]
        index[closer] = i

    valid = index >= 0
    depth = np.where(valid, depth, 0.0)
    points = center + dirs * depth[..., None]
    return depth, index, points


def render_image(
    scene: Scene,
    T_w_c: Pose,
    K: CameraIntrinsics,
    exposure: float = 1.0,
    a: float = 0.0,
    b: float = 0.0,
    quantize: bool = True,
    dither: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Intensity t * exp(a) * radiance + b and ground-truth depth (0 on background)."""
    depth, index, points = cast_rays(scene, T_w_c, K)
    radiance = np.full(depth.shape, BACKGROUND)
    for i, (plane, texture) in enumerate(zip(scene.planes, scene.textures)):
        mask = index == i
        if mask.any():
            lu, lv = plane.local(points[mask])
            radiance[mask] = texture(lu, lv)
    image = np.where(index >= 0, exposure * math.exp(a) * radiance + b, BACKGROUND)
    if quantize:
        if dither:
            rng = rng or np.random.default_rng(0)
            image = image + rng.uniform(-0.5, 0.5, image.shape)
        image = np.clip(np.rint(image), 0, 255)
    return image, depth


def sample_surfel_map(scene: Scene, voxel: float) -> SurfelMap:
    """Surfels tiling every plane rectangle at (at most) voxel spacing, with exact normals."""
    if voxel <= 0:
        raise SceneError(f"Voxel size must be positive, got {voxel}")
    positions, normals = [], []
    for plane in scene.planes:
        n_u = int(math.ceil(plane.extent_u / voxel - 1e-9))
        n_v = int(math.ceil(plane.extent_v / voxel - 1e-9))
        s = (np.arange(n_u) + 0.5) * plane.extent_u / n_u
        t = (np.arange(n_v) + 0.5) * plane.extent_v / n_v
        ss, tt = np.meshgrid(s, t, indexing="ij")
        pts = plane.origin + ss.reshape(-1, 1) * plane.axis_u + tt.reshape(-1, 1) * plane.axis_v
        positions.append(pts)
        normals.append(np.tile(plane.plane.normal, (len(pts), 1)))
    positions = np.concatenate(positions)
    radii = np.full(len(positions), surfel_radius(voxel))
    surfel_map = SurfelMap(positions, np.concatenate(normals), radii, voxel)
    logger.info(f"Sampled {len(surfel_map)} surfels at voxel {voxel} m")
    return surfel_map


def perturb_map(surfel_map: SurfelMap, sigma: float, seed: int = 0, k: int = 10) -> SurfelMap:
    """Gaussian position noise followed by PCA normal re-estimation.

    Re-estimated normals keep the orientation of the original ones; surfels
    whose neighbourhood yields no normal are dropped.
    """
    if sigma < 0:
        raise SceneError(f"Noise level must be non-negative, got {sigma}")
    rng = np.random.default_rng(seed)
    positions = surfel_map.positions + rng.normal(0.0, sigma, surfel_map.positions.shape)
    normals, valid = estimate_normals_pca(positions, k)
    flip = np.einsum("ni,ni->n", np.nan_to_num(normals), surfel_map.normals) < 0
    normals[flip] *= -1.0
    if not valid.all():
        logger.info(f"Dropped {int((~valid).sum())} surfels without a valid normal after perturbation")
    return SurfelMap(positions[valid], normals[valid], surfel_map.radii[valid], surfel_map.voxel_size)


def perturb_pose(pose: Pose, trans_m: float, rot_deg: float, seed: int = 0) -> Pose:
    """Move the camera center by exactly `trans_m` and rotate it by exactly `rot_deg` about random axes."""
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R = so3_exp(axis * math.radians(rot_deg)) @ pose.rotation
    return Pose(R, pose.translation + trans_m * direction)


def look_at(eye: Sequence[float], target: Sequence[float], up: Sequence[float] = (0.0, 0.0, 1.0)) -> Pose:
    """T_w_c of a camera at `eye` looking at `target` (image y axis points down)."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    norm = np.linalg.norm(x)
    if norm < 1e-9:
        raise SceneError("Viewing direction is parallel to the up vector")
    x /= norm
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)
