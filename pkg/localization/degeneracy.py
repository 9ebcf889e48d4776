"""Observability analysis of surfel constraints.

A gauge g = (eps, t_bar, phi) maps every camera pose by the similarity
x -> (1 + eps) * exp(phi) x + t_bar while the map stays fixed. Relative
translations scale with lambda = 1 + eps, so a non-surfel measurement is
invariant under every gauge, while a surfel measurement changes whenever the
host camera moves relative to its plane. The nullspace of the stacked
measurement Jacobian with respect to g is the unobservable part of the
localization problem.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from common.geometry import CameraIntrinsics, PlaneCoeffs, Pose, normalized_ray, so3_exp
from config.constants import GAUGE_DIMENSIONS, DegeneracyClass, PointStatus
from config.settings import RenderConfig
from localization.state import WindowState
from mapping.renderer import render
from mapping.surfel_map import SurfelMap

logger = logging.getLogger(__name__)

GAUGE_DIM = 7
FD_STEP = 1e-6
MAX_REPORT_CONSTRAINTS = 300
COMMON_POINT_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class SurfelConstraint:
    """One host ray observed in target frames.

    With `plane_w` set the depth is induced by the plane (surfel constraint);
    otherwise `inv_depth` is a free host inverse depth.
    """

    T_h_w: Pose
    xbar: np.ndarray
    targets: Tuple[Pose, ...]
    plane_w: Optional[PlaneCoeffs] = None
    inv_depth: Optional[float] = None

    @property
    def is_surfel(self) -> bool:
        return self.plane_w is not None


def normal_scatter_eigs(normals: Sequence[np.ndarray]) -> np.ndarray:
    """Eigenvalues of (1/N) sum n n^T, descending."""
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    if len(normals) == 0:
        raise ValueError("Normal scatter needs at least one normal")
    scatter = normals.T @ normals / len(normals)
    return np.linalg.eigvalsh(scatter)[::-1]


def _smallest_eigenvector(normals: np.ndarray) -> np.ndarray:
    scatter = normals.T @ normals / len(normals)
    return np.linalg.eigh(scatter)[1][:, 0]


def canonical_planes(planes: Sequence[PlaneCoeffs]) -> Tuple[np.ndarray, np.ndarray]:
    """(normals, d) with signs flipped to agree with the first normal."""
    normals = np.array([p.normal for p in planes]).reshape(-1, 3)
    d = np.array([p.d for p in planes])
    if len(normals):
        flip = normals @ normals[0] < 0
        normals[flip] *= -1.0
        d[flip] *= -1.0
    return normals, d


def classify(
    planes: Sequence[PlaneCoeffs],
    coplanar_epsilon: float = 1e-3,
    angle_tolerance_deg: float = 2.0,
    offset_tolerance: float = 0.05,
) -> DegeneracyClass:
    """Geometry class of the constraint planes."""
    if not planes:
        return DegeneracyClass.PURE_VISUAL
    normals, d = canonical_planes(planes)
    cos_tol = math.cos(math.radians(angle_tolerance_deg))
    if np.all(normals @ normals[0] >= cos_tol):
        if np.all(np.abs(d - d[0]) <= offset_tolerance):
            return DegeneracyClass.SINGLE_PLANE
        return DegeneracyClass.PARALLEL_PLANES
    e = normal_scatter_eigs(normals)
    if e[2] / e[0] < coplanar_epsilon:
        return DegeneracyClass.COPLANAR_NORMALS
    return DegeneracyClass.WELL_CONSTRAINED


def homothety_center(planes: Sequence[PlaneCoeffs], tol: float = COMMON_POINT_TOLERANCE) -> Optional[np.ndarray]:
    """A point common to all planes, or None.

    Scaling the cameras about such a point keeps every plane in place.
    """
    if not planes:
        return None
    normals, d = canonical_planes(planes)
    x, *_ = np.linalg.lstsq(normals, -d, rcond=None)
    if np.max(np.abs(normals @ x + d)) <= tol:
        return x
    return None


def _stack(constraints: Sequence[SurfelConstraint]) -> Dict[str, np.ndarray]:
    """Flatten (constraint, target) pairs into arrays."""
    rows = [(c, T_t_w) for c in constraints for T_t_w in c.targets]
    T_w_h = [c.T_h_w.inverse() for c, _ in rows]
    T_t_h = [T_t_w @ c.T_h_w.inverse() for c, T_t_w in rows]
    surfel = np.array([c.is_surfel for c, _ in rows])
    return {
        "R_wh": np.array([T.rotation for T in T_w_h]),
        "c_h": np.array([T.translation for T in T_w_h]),
        "xbar": np.array([c.xbar for c, _ in rows]),
        "R_th": np.array([T.rotation for T in T_t_h]),
        "t_th": np.array([T.translation for T in T_t_h]),
        "surfel": surfel,
        "n": np.array([c.plane_w.normal if c.is_surfel else np.zeros(3) for c, _ in rows]),
        "d": np.array([c.plane_w.d if c.is_surfel else 1.0 for c, _ in rows]),
        "rho": np.array([np.nan if c.is_surfel else c.inv_depth for c, _ in rows], dtype=float),
    }


def gauge_measurements(arrays: Dict[str, np.ndarray], g: np.ndarray) -> np.ndarray:
    """Normalized target coordinates of every (constraint, target) pair under gauge g."""
    lam = 1.0 + g[0]
    t_bar = g[1:4]
    R_bar = so3_exp(g[4:7])
    n, d, xbar = arrays["n"], arrays["d"], arrays["xbar"]

    # Host plane after moving the host camera by the gauge
    n_h = np.einsum("mji,mj->mi", arrays["R_wh"], n @ R_bar)
    c_h = lam * arrays["c_h"] @ R_bar.T + t_bar
    d_h = d + np.einsum("mi,mi->m", n, c_h)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho_plane = -np.einsum("mi,mi->m", n_h, xbar) / d_h
    rho = np.where(arrays["surfel"], rho_plane, arrays["rho"] / lam)

    X = np.einsum("mij,mj->mi", arrays["R_th"], xbar) + lam * arrays["t_th"] * rho[:, None]
    return (X[:, :2] / X[:, 2:3]).ravel()


def gauge_nullspace(
    constraints: Sequence[SurfelConstraint], tolerance: float = 1e-8
) -> Tuple[int, np.ndarray]:
    """Dimension and orthonormal basis (7 x dim) of the gauge directions leaving all measurements unchanged.

    Gauge coordinates are ordered (scale, translation, rotation).
    """
    if not any(c.is_surfel and c.targets for c in constraints):
        # Non-surfel measurements are gauge invariant: the whole 7-dim family is unobservable
        return GAUGE_DIM, np.eye(GAUGE_DIM)
    arrays = _stack(constraints)
    J = np.empty((2 * len(arrays["xbar"]), GAUGE_DIM))
    for k in range(GAUGE_DIM):
        g = np.zeros(GAUGE_DIM)
        g[k] = FD_STEP
        J[:, k] = (gauge_measurements(arrays, g) - gauge_measurements(arrays, -g)) / (2.0 * FD_STEP)
    J = J[np.all(np.isfinite(J), axis=1)]
    _, s, Vt = np.linalg.svd(J, full_matrices=True)
    s_full = np.zeros(GAUGE_DIM)
    s_full[: len(s)] = s
    s_max = s_full.max()
    null = s_full <= tolerance * s_max if s_max > 0 else np.ones(GAUGE_DIM, dtype=bool)
    basis = Vt[null].T
    return int(null.sum()), basis


def constraints_from_window(window: WindowState, max_constraints: Optional[int] = MAX_REPORT_CONSTRAINTS) -> List[SurfelConstraint]:
    """Surfel constraints of associated points (evenly subsampled when `max_constraints` is set)."""
    points = window.points_with(PointStatus.ASSOCIATED)
    if max_constraints and len(points) > max_constraints:
        step = len(points) / max_constraints
        points = [points[int(i * step)] for i in range(max_constraints)]
    constraints = []
    for p in points:
        host = window.frame(p.host_id)
        targets = tuple(
            kf.T_c_w for kf in window.keyframes if kf.frame_id != p.host_id and kf.frame_id not in p.dropped_targets
        )
        constraints.append(SurfelConstraint(host.T_c_w, normalized_ray(window.K, p.pixel), targets, plane_w=p.plane))
    return constraints


@dataclass
class DegeneracyReport:
    classification: DegeneracyClass
    nullspace_dim: int
    basis: np.ndarray
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(3))
    n_omega: Optional[np.ndarray] = None
    homothety: bool = False
    num_constraints: int = 0
    keyframe_id: Optional[int] = None

    @property
    def eig_ratio_21(self) -> float:
        return float(self.eigenvalues[1] / self.eigenvalues[0]) if self.eigenvalues[0] > 0 else 0.0

    @property
    def eig_ratio_31(self) -> float:
        return float(self.eigenvalues[2] / self.eigenvalues[0]) if self.eigenvalues[0] > 0 else 0.0

    @property
    def expected_dim(self) -> int:
        extra = self.homothety and self.classification in (
            DegeneracyClass.COPLANAR_NORMALS,
            DegeneracyClass.WELL_CONSTRAINED,
        )
        return GAUGE_DIMENSIONS[self.classification] + int(extra)

    def is_consistent(self) -> bool:
        return self.nullspace_dim == self.expected_dim

    def to_text(self) -> str:
        """One key=value per line."""
        lines = []
        if self.keyframe_id is not None:
            lines.append(f"keyframe_id={self.keyframe_id}")
        lines += [
            f"classification={self.classification.value}",
            f"nullspace_dim={self.nullspace_dim}",
            f"expected_dim={self.expected_dim}",
            f"consistent={str(self.is_consistent()).lower()}",
            f"num_constraints={self.num_constraints}",
            "eigenvalues=" + " ".join(f"{e:.6g}" for e in self.eigenvalues),
            f"eig_ratio_21={self.eig_ratio_21:.6g}",
            f"eig_ratio_31={self.eig_ratio_31:.6g}",
            f"homothety={str(self.homothety).lower()}",
        ]
        if self.n_omega is not None:
            lines.append("n_omega=" + " ".join(f"{v:.6g}" for v in self.n_omega))
        for k in range(self.basis.shape[1]):
            lines.append(f"basis_{k}=" + " ".join(f"{v:.6g}" for v in self.basis[:, k]))
        return "\n".join(lines) + "\n"


def report_constraints(
    constraints: Sequence[SurfelConstraint],
    coplanar_epsilon: float = 1e-3,
    angle_tolerance_deg: float = 2.0,
    offset_tolerance: float = 0.05,
    nullspace_tolerance: float = 1e-8,
) -> DegeneracyReport:
    """Classification, normal scatter and gauge nullspace of a constraint set."""
    planes = [c.plane_w for c in constraints if c.is_surfel]
    classification = classify(planes, coplanar_epsilon, angle_tolerance_deg, offset_tolerance)
    dim, basis = gauge_nullspace(constraints, nullspace_tolerance)
    eigs = normal_scatter_eigs([p.normal for p in planes]) if planes else np.zeros(3)
    n_omega = None
    if classification == DegeneracyClass.COPLANAR_NORMALS:
        n_omega = _smallest_eigenvector(canonical_planes(planes)[0])
    report = DegeneracyReport(
        classification=classification,
        nullspace_dim=dim,
        basis=basis,
        eigenvalues=eigs,
        n_omega=n_omega,
        homothety=homothety_center(planes) is not None,
        num_constraints=len(planes),
    )
    if not report.is_consistent():
        logger.warning(
            f"Nullspace dimension {dim} differs from {report.expected_dim} expected for {classification.value}"
        )
    return report


def report(window: WindowState, **tolerances) -> DegeneracyReport:
    """Degeneracy report of the surfel constraints currently in the window."""
    result = report_constraints(constraints_from_window(window), **tolerances)
    if window.keyframes:
        result.keyframe_id = window.last_keyframe.frame_id
    return result


def constraints_from_trajectory(
    surfel_map: SurfelMap,
    poses: Sequence[Pose],
    K: CameraIntrinsics,
    render_config: Optional[RenderConfig] = None,
    window_size: int = 7,
    stride: int = 8,
    max_constraints: Optional[int] = MAX_REPORT_CONSTRAINTS,
) -> List[SurfelConstraint]:
    """Surfel constraints a localizer could form along a known trajectory.

    Every pose (T_w_c) hosts a pixel grid with spacing `stride`; pixels that see a surfel
    are observed by the following `window_size - 1` poses.
    """
    T_c_w = [p.inverse() for p in poses]
    u, v = np.meshgrid(np.arange(stride // 2, K.width, stride), np.arange(stride // 2, K.height, stride))
    grid = np.stack([u.ravel(), v.ravel()], axis=1).astype(float)
    constraints = []
    for i, pose in enumerate(poses):
        targets = tuple(T_c_w[i + 1 : i + window_size])
        if not targets:
            break
        normals, d, valid = render(surfel_map, pose, K, render_config).planes_at(grid)
        for k in np.flatnonzero(valid):
            plane = PlaneCoeffs(normals[k], float(d[k]))
            constraints.append(SurfelConstraint(T_c_w[i], normalized_ray(K, grid[k]), targets, plane_w=plane))
    if max_constraints and len(constraints) > max_constraints:
        step = len(constraints) / max_constraints
        constraints = [constraints[int(i * step)] for i in range(max_constraints)]
    logger.debug(f"Collected {len(constraints)} surfel constraints from {len(poses)} poses")
    return constraints
