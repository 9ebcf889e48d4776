"""Timestamped trajectories, association, similarity alignment, ATE and RPE."""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from common.errors import AlignmentError, MetricError, TrajectoryFormatError
from common.geometry import Pose

logger = logging.getLogger(__name__)

# Second/first singular value ratio under which positions count as collinear
COLLINEAR_RATIO = 1e-9


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Camera-to-world poses (T_w_c) with strictly increasing timestamps."""

    timestamps: np.ndarray
    poses: Tuple[Pose, ...]

    def __post_init__(self):
        timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        object.__setattr__(self, "timestamps", timestamps)
        object.__setattr__(self, "poses", tuple(self.poses))
        if len(timestamps) != len(self.poses):
            raise MetricError("Timestamps and poses differ in length")
        if np.any(np.diff(timestamps) <= 0):
            raise MetricError("Trajectory timestamps must be strictly increasing")

    @classmethod
    def from_pairs(cls, pairs: Sequence[Tuple[float, Pose]]) -> "Trajectory":
        return cls(np.array([t for t, _ in pairs]), tuple(p for _, p in pairs))

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def path_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.positions, axis=0), axis=1).sum())

    def diameter(self) -> float:
        """Largest distance between two positions."""
        pos = self.positions
        if len(pos) < 2:
            return 0.0
        return float(np.max(np.linalg.norm(pos[:, None] - pos[None], axis=2)))

    def subset(self, indices: np.ndarray) -> "Trajectory":
        return Trajectory(self.timestamps[indices], tuple(self.poses[i] for i in indices))


def read_tum(path: Union[str, Path]) -> Trajectory:
    """Read 'timestamp tx ty tz qx qy qz qw' lines; '#' starts a comment."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise TrajectoryFormatError(f"Cannot read trajectory {path}: {e}") from e
    timestamps, poses = [], []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise TrajectoryFormatError(f"Expected 8 values, got {len(fields)}", line=lineno)
        try:
            values = [float(v) for v in fields]
        except ValueError as e:
            raise TrajectoryFormatError(f"Non-numeric value: {e}", line=lineno) from e
        if not all(math.isfinite(v) for v in values):
            raise TrajectoryFormatError("Non-finite value", line=lineno)
        timestamps.append(values[0])
        poses.append(Pose.from_tum(values[1:]))
    return Trajectory(np.array(timestamps), tuple(poses))


def write_tum(path: Union[str, Path], trajectory: Trajectory) -> None:
    lines = []
    for t, pose in zip(trajectory.timestamps, trajectory.poses):
        values = " ".join(f"{v:.9f}" for v in pose.to_tum())
        lines.append(f"{t:.6f} {values}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def associate(est: Trajectory, gt: Trajectory, max_dt: float = 0.01) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest-timestamp pairs within `max_dt`, one-to-one; returns (est indices, gt indices)."""
    if len(est) == 0 or len(gt) == 0:
        return np.empty(0, dtype=int), np.empty(0, dtype=int)
    right = np.clip(np.searchsorted(gt.timestamps, est.timestamps), 0, len(gt) - 1)
    left = np.clip(right - 1, 0, len(gt) - 1)
    pick_left = np.abs(gt.timestamps[left] - est.timestamps) <= np.abs(gt.timestamps[right] - est.timestamps)
    nearest = np.where(pick_left, left, right)
    dt = np.abs(gt.timestamps[nearest] - est.timestamps)
    ok = np.flatnonzero(dt <= max_dt)

    # Keep the closest estimate when several map to the same ground-truth sample
    order = ok[np.lexsort((dt[ok], nearest[ok]))]
    _, first = np.unique(nearest[order], return_index=True)
    est_idx = np.sort(order[first])
    return est_idx, nearest[est_idx]


def umeyama(source: np.ndarray, target: np.ndarray, with_scale: bool = True) -> Tuple[float, np.ndarray, np.ndarray]:
    """(s, R, t) minimizing sum |target - (s R source + t)|^2."""
    n = len(source)
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    src, tgt = source - mu_s, target - mu_t
    cov = tgt.T @ src / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = float(np.sum(src**2)) / n
    s = float(np.trace(np.diag(D) @ S)) / var_s if with_scale else 1.0
    t = mu_t - s * R @ mu_s
    return s, R, t


def align(est: Trajectory, gt: Trajectory, with_scale: bool = True, max_dt: float = 0.01) -> Tuple[float, Pose]:
    """Similarity (scale, Pose) mapping estimated positions onto ground truth."""
    est_idx, gt_idx = associate(est, gt, max_dt)
    if len(est_idx) < 3:
        raise AlignmentError(f"Alignment needs at least 3 associated poses, got {len(est_idx)}")
    source = est.positions[est_idx]
    target = gt.positions[gt_idx]
    sv = np.linalg.svd(source - source.mean(axis=0), compute_uv=False)
    if sv[0] == 0 or sv[1] <= COLLINEAR_RATIO * sv[0]:
        raise AlignmentError("Estimated positions are collinear, rotation about their line is unobservable")
    s, R, t = umeyama(source, target, with_scale)
    logger.debug(f"Aligned {len(est_idx)} poses, scale {s:.6f}")
    return s, Pose(R, t)


def apply_alignment(trajectory: Trajectory, scale: float, transform: Pose) -> Trajectory:
    """Map every pose by x -> scale * R x + t (rotations by R)."""
    R, t = transform.rotation, transform.translation
    poses = tuple(Pose(R @ p.rotation, scale * R @ p.translation + t) for p in trajectory.poses)
    return Trajectory(trajectory.timestamps, poses)


def ate_rmse(est: Trajectory, gt: Trajectory, max_dt: float = 0.01) -> float:
    """RMSE of position differences over associated pairs (no alignment applied)."""
    est_idx, gt_idx = associate(est, gt, max_dt)
    if len(est_idx) == 0:
        raise MetricError("No associated poses for ATE")
    err = est.positions[est_idx] - gt.positions[gt_idx]
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


def rpe_errors(est: Trajectory, gt: Trajectory, segment_length: float, max_dt: float = 0.01) -> np.ndarray:
    """Relative translation error of every segment spanning `segment_length` of ground-truth path."""
    if segment_length <= 0:
        raise MetricError(f"Segment length must be positive, got {segment_length}")
    est_idx, gt_idx = associate(est, gt, max_dt)
    if len(est_idx) < 2:
        raise MetricError(f"RPE needs at least 2 associated poses, got {len(est_idx)}")
    gt_pos = gt.positions[gt_idx]
    travelled = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(gt_pos, axis=0), axis=1))])
    ends = np.searchsorted(travelled, travelled + segment_length - 1e-9)
    errors: List[float] = []
    for i, j in enumerate(ends):
        if j >= len(travelled):
            break
        G = gt.poses[gt_idx[i]].inverse() @ gt.poses[gt_idx[j]]
        E = est.poses[est_idx[i]].inverse() @ est.poses[est_idx[j]]
        errors.append(float(np.linalg.norm((G.inverse() @ E).translation)))
    if not errors:
        raise MetricError(f"No full {segment_length} m segment in {travelled[-1]:.2f} m of path")
    return np.array(errors)


def rpe(est: Trajectory, gt: Trajectory, segment_length: float, max_dt: float = 0.01) -> float:
    """RMSE of relative translation errors over segments of `segment_length` meters."""
    errors = rpe_errors(est, gt, segment_length, max_dt)
    return float(np.sqrt(np.mean(errors**2)))
