"""Surfel map construction, storage and lookup."""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from common.errors import MapBuildError, MapFormatError
from mapping.ply import read_ply, write_ply

logger = logging.getLogger(__name__)

# Middle/largest eigenvalue ratio below which a neighborhood is treated as a line
COLLINEAR_RATIO = 1e-6


@dataclass(frozen=True, eq=False)
class Surfel:
    position: np.ndarray
    normal: np.ndarray
    radius: float


@dataclass(frozen=True, eq=False)
class SurfelMap:
    """Immutable surfel arrays: positions (N, 3), unit normals (N, 3), radii (N,)."""

    positions: np.ndarray
    normals: np.ndarray
    radii: np.ndarray
    voxel_size: float = 0.0

    def __post_init__(self):
        positions = np.ascontiguousarray(self.positions, dtype=float).reshape(-1, 3)
        normals = np.ascontiguousarray(self.normals, dtype=float).reshape(-1, 3)
        radii = np.ascontiguousarray(self.radii, dtype=float).reshape(-1)
        if not (len(positions) == len(normals) == len(radii)):
            raise MapBuildError("Surfel arrays have different lengths")
        for arr in (positions, normals, radii):
            arr.setflags(write=False)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "radii", radii)

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Surfel:
        return Surfel(self.positions[i], self.normals[i], float(self.radii[i]))

    def __iter__(self) -> Iterator[Surfel]:
        for i in range(len(self)):
            yield self[i]

    def is_valid(self, tol: float = 1e-6) -> bool:
        return (
            len(self) > 0
            and bool(np.all(np.abs(np.linalg.norm(self.normals, axis=1) - 1.0) < tol))
            and bool(np.all(self.radii > 0))
        )

    def subset(self, mask: np.ndarray) -> "SurfelMap":
        return SurfelMap(self.positions[mask], self.normals[mask], self.radii[mask], self.voxel_size)


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """One centroid per occupied voxel, ordered by voxel index."""
    if voxel <= 0:
        raise MapBuildError(f"Voxel size must be positive, got {voxel}")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return points.copy()
    keys = np.floor(points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, points)
    return sums / counts[:, None]


def estimate_normals_pca(
    points: np.ndarray,
    k: int = 10,
    viewpoint: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """PCA normals of the k-NN neighborhood (point included).

    Normals are flipped to face `viewpoint` (default: origin). Returns
    (normals, valid); invalid entries have too few neighbors or a collinear
    neighborhood and hold NaN.
    """
    if k < 3:
        raise MapBuildError(f"k must be at least 3, got {k}")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(points)
    normals = np.full((n, 3), np.nan)
    valid = np.zeros(n, dtype=bool)
    if n < k:
        logger.warning(f"Only {n} points for k={k}, no normals estimated")
        return normals, valid

    tree = cKDTree(points)
    _, idx = tree.query(points, k=k)
    neighbors = points[idx]
    centered = neighbors - neighbors.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigvals, eigvecs = np.linalg.eigh(cov)

    largest = eigvals[:, 2]
    valid = (largest > 0) & (eigvals[:, 1] > COLLINEAR_RATIO * largest)
    normals = eigvecs[:, :, 0].copy()

    view = np.zeros(3) if viewpoint is None else np.asarray(viewpoint, dtype=float)
    flip = np.einsum("ni,ni->n", normals, view - points) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[~valid] = np.nan
    return normals, valid


def surfel_radius(voxel: float) -> float:
    """Disk radius covering a voxel footprint."""
    return voxel * math.sqrt(2.0) / 2.0


def build_surfel_map(
    points: np.ndarray,
    voxel: float,
    k: int = 10,
    viewpoint: Optional[np.ndarray] = None,
) -> SurfelMap:
    """Downsample, estimate normals and assign uniform radii."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise MapBuildError("Point cloud is empty")
    centers = voxel_downsample(points, voxel)
    normals, valid = estimate_normals_pca(centers, k, viewpoint)
    dropped = int((~valid).sum())
    if dropped:
        logger.info(f"Excluded {dropped} of {len(centers)} surfels with invalid normals")
    if not valid.any():
        raise MapBuildError("No surfel has a valid normal")
    radii = np.full(int(valid.sum()), surfel_radius(voxel))
    surfel_map = SurfelMap(centers[valid], normals[valid], radii, voxel)
    logger.info(f"Built surfel map: {len(surfel_map)} surfels, voxel {voxel} m, radius {radii[0]:.4f} m")
    return surfel_map


def save_map(surfel_map: SurfelMap, path: Union[str, Path]) -> None:
    columns = {
        "x": surfel_map.positions[:, 0],
        "y": surfel_map.positions[:, 1],
        "z": surfel_map.positions[:, 2],
        "nx": surfel_map.normals[:, 0],
        "ny": surfel_map.normals[:, 1],
        "nz": surfel_map.normals[:, 2],
        "radius": surfel_map.radii,
    }
    write_ply(path, columns, comments=[f"voxel_size {surfel_map.voxel_size!r}"])


def load_map(path: Union[str, Path], default_radius: Optional[float] = None) -> SurfelMap:
    """Load a surfel PLY; normals are renormalized after a sanity check."""
    columns, comments = read_ply(path)
    missing = [c for c in ("x", "y", "z", "nx", "ny", "nz") if c not in columns]
    if missing:
        raise MapFormatError(f"Surfel map lacks properties {missing}")

    voxel_size = 0.0
    for comment in comments:
        tokens = comment.split()
        if len(tokens) == 2 and tokens[0] == "voxel_size":
            voxel_size = float(tokens[1])

    positions = np.stack([columns["x"], columns["y"], columns["z"]], axis=1)
    normals = np.stack([columns["nx"], columns["ny"], columns["nz"]], axis=1)
    norms = np.linalg.norm(normals, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-3)
    if bad.size:
        raise MapFormatError("Normal is not unit length", record=int(bad[0]))
    normals = normals / norms[:, None]

    if "radius" in columns:
        radii = columns["radius"]
    elif default_radius is not None:
        radii = np.full(len(positions), default_radius)
    elif voxel_size > 0:
        radii = np.full(len(positions), surfel_radius(voxel_size))
    else:
        raise MapFormatError("Surfel map has no radius and no voxel size")
    bad = np.flatnonzero(radii <= 0)
    if bad.size:
        raise MapFormatError("Radius is not positive", record=int(bad[0]))

    surfel_map = SurfelMap(positions, normals, radii, voxel_size)
    logger.info(f"Loaded {len(surfel_map)} surfels from {path}")
    return surfel_map
