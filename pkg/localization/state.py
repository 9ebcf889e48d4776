"""Keyframe, point and window state shared by the front-end and the optimizer."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from common.geometry import CameraIntrinsics, PlaneCoeffs, Pose, normalized_ray, ray_plane_inverse_depth, transform_plane
from common.image import ImagePyramid
from config.constants import PointStatus

logger = logging.getLogger(__name__)

FRAME_DIM = 8


@dataclass(eq=False)
class FrameState:
    """Photometric and geometric state of one frame.

    Pose is stored world-to-camera (T_c_w); updates are left-multiplicative.
    The image model is I = t * exp(a) * radiance + b.
    """

    frame_id: int
    pyramid: ImagePyramid
    T_c_w: Pose
    exposure_time: float = 1.0
    a: float = 0.0
    b: float = 0.0
    timestamp: float = 0.0
    # First estimate (pose, a, b), set once the frame is tied to the marginalization prior
    first_estimate: Optional[Tuple[Pose, float, float]] = None

    def __post_init__(self):
        if not self.exposure_time > 0:
            raise ValueError(f"Exposure time must be positive, got {self.exposure_time}")

    @property
    def T_w_c(self) -> Pose:
        return self.T_c_w.inverse()

    def copy_with(self, T_c_w: Optional[Pose] = None, a: Optional[float] = None, b: Optional[float] = None) -> "FrameState":
        return FrameState(
            frame_id=self.frame_id,
            pyramid=self.pyramid,
            T_c_w=self.T_c_w if T_c_w is None else T_c_w,
            exposure_time=self.exposure_time,
            a=self.a if a is None else a,
            b=self.b if b is None else b,
            timestamp=self.timestamp,
            first_estimate=self.first_estimate,
        )

    def fix_first_estimate(self) -> None:
        if self.first_estimate is None:
            self.first_estimate = (self.T_c_w, self.a, self.b)


@dataclass(eq=False)
class TrackedPoint:
    """A host pixel with its depth hypothesis and lifecycle status."""

    point_id: int
    host_id: int
    pixel: np.ndarray
    inv_depth: float
    inv_depth_sigma: float
    status: PointStatus = PointStatus.CANDIDATE
    plane: Optional[PlaneCoeffs] = None
    seeded: bool = False
    traced: bool = False
    dropped_targets: Set[int] = field(default_factory=set)
    # target id -> (P,) pattern pixels removed as outliers
    outlier_pixels: Dict[int, np.ndarray] = field(default_factory=dict)
    history: List[PointStatus] = field(default_factory=list)

    def __post_init__(self):
        self.pixel = np.asarray(self.pixel, dtype=float).reshape(2)
        if not self.history:
            self.history.append(self.status)

    @property
    def is_associated(self) -> bool:
        return self.status == PointStatus.ASSOCIATED

    def set_status(self, status: PointStatus) -> None:
        if status == self.status:
            return
        if self.status == PointStatus.ASSOCIATED and status in (PointStatus.ACTIVE, PointStatus.CANDIDATE):
            raise AssertionError(f"Point #{self.point_id}: associated points never regain a free depth")
        logger.debug(f"Point #{self.point_id}: {self.status.value} -> {status.value}")
        self.status = status
        self.history.append(status)

    def associate(self, plane: PlaneCoeffs) -> None:
        self.plane = plane
        self.set_status(PointStatus.ASSOCIATED)

    def ray(self, K: CameraIntrinsics) -> np.ndarray:
        return normalized_ray(K, self.pixel)

    def rho_prime(self, T_h_w: Pose, K: CameraIntrinsics) -> float:
        """Surfel-induced inverse depth of an associated point."""
        return ray_plane_inverse_depth(self.ray(K), transform_plane(T_h_w, self.plane))

    def current_inv_depth(self, T_h_w: Pose, K: CameraIntrinsics) -> float:
        if self.is_associated:
            return self.rho_prime(T_h_w, K)
        return self.inv_depth


@dataclass(eq=False)
class MarginalizationPrior:
    """Quadratic prior dx^T H dx + 2 b^T dx over frame states, dx = x (-) first estimate."""

    frame_ids: List[int] = field(default_factory=list)
    H: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    b: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def is_empty(self) -> bool:
        return not self.frame_ids

    def is_psd(self, tol: float = 1e-8) -> bool:
        if self.is_empty:
            return True
        sym = np.allclose(self.H, self.H.T, atol=tol * max(1.0, np.abs(self.H).max()))
        return sym and np.linalg.eigvalsh(0.5 * (self.H + self.H.T)).min() >= -tol * max(1.0, np.abs(self.H).max())


@dataclass(eq=False)
class WindowState:
    """Keyframes in the sliding window, their hosted points and the prior."""

    K: CameraIntrinsics
    max_keyframes: int = 7
    keyframes: List[FrameState] = field(default_factory=list)
    points: Dict[int, TrackedPoint] = field(default_factory=dict)
    prior: MarginalizationPrior = field(default_factory=MarginalizationPrior)
    next_point_id: int = 0

    def frame(self, frame_id: int) -> FrameState:
        for kf in self.keyframes:
            if kf.frame_id == frame_id:
                return kf
        raise KeyError(f"Keyframe #{frame_id} is not in the window")

    def frame_index(self, frame_id: int) -> int:
        for i, kf in enumerate(self.keyframes):
            if kf.frame_id == frame_id:
                return i
        raise KeyError(f"Keyframe #{frame_id} is not in the window")

    @property
    def last_keyframe(self) -> FrameState:
        return self.keyframes[-1]

    def add_point(self, **kwargs) -> TrackedPoint:
        point = TrackedPoint(point_id=self.next_point_id, **kwargs)
        self.points[point.point_id] = point
        self.next_point_id += 1
        return point

    def points_with(self, *statuses: PointStatus, host_id: Optional[int] = None) -> List[TrackedPoint]:
        return [
            p
            for p in self.points.values()
            if p.status in statuses and (host_id is None or p.host_id == host_id)
        ]

    def has_associations(self) -> bool:
        return any(p.is_associated for p in self.points.values())

    def check_invariants(self) -> None:
        """Raises AssertionError when window bookkeeping is inconsistent."""
        assert len(self.keyframes) <= self.max_keyframes, "Too many keyframes in the window"
        ids = {kf.frame_id for kf in self.keyframes}
        for p in self.points.values():
            assert p.host_id in ids, f"Point #{p.point_id} hosted outside the window"
            assert (p.status == PointStatus.ASSOCIATED) == (p.plane is not None) or p.status == PointStatus.OUTLIER, (
                f"Point #{p.point_id} association and plane disagree"
            )
            if p.status in (PointStatus.CANDIDATE, PointStatus.ACTIVE):
                assert p.inv_depth > 0, f"Point #{p.point_id} has non-positive inverse depth"
        assert set(self.prior.frame_ids) <= ids, "Prior references frames outside the window"
        assert self.prior.is_psd(), "Marginalization prior is not positive semidefinite"
