"""CPU surfel rasterizer producing depth, vertex and normal maps."""
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from common.geometry import CameraIntrinsics, PlaneCoeffs, Pose
from common.image import write_pgm16
from config.constants import NORMAL_MAP_MAGIC, VERTEX_MAP_MAGIC
from config.settings import RenderConfig
from mapping.surfel_map import SurfelMap

logger = logging.getLogger(__name__)

# Upper bound on (surfel, pixel) candidate pairs evaluated at once
MAX_PAIRS_PER_CHUNK = 2_000_000
RASTER_HEADER = struct.Struct("<4sHH")


@dataclass(frozen=True, eq=False)
class RenderedMaps:
    """Per-pixel rasters; invalid pixels have depth 0 and NaN vertex/normal."""

    depth: np.ndarray
    vertex: np.ndarray
    normal: np.ndarray
    valid: np.ndarray
    surfel_index: np.ndarray
    radius: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.depth.shape

    @property
    def coverage(self) -> float:
        return float(self.valid.mean())

    def _pixel(self, p: np.ndarray) -> Tuple[int, int]:
        u, v = int(round(float(p[0]))), int(round(float(p[1])))
        h, w = self.depth.shape
        if not (0 <= u < w and 0 <= v < h):
            raise IndexError(f"Pixel ({p[0]}, {p[1]}) outside {w}x{h} maps")
        return u, v

    def depth_at(self, p: np.ndarray) -> Optional[float]:
        """Rendered depth at the nearest pixel, None when nothing was hit."""
        u, v = self._pixel(p)
        if not self.valid[v, u]:
            return None
        return float(self.depth[v, u])

    def plane_at(self, p: np.ndarray) -> Optional[PlaneCoeffs]:
        """World plane of the surfel seen at the nearest pixel."""
        u, v = self._pixel(p)
        if not self.valid[v, u]:
            return None
        n = self.normal[v, u]
        return PlaneCoeffs(n, -float(n @ self.vertex[v, u]))

    def _lookup(self, uv: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        uv = np.asarray(uv, dtype=float).reshape(-1, 2)
        h, w = self.depth.shape
        u = np.rint(uv[:, 0])
        v = np.rint(uv[:, 1])
        inside = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        ui = np.where(inside, u, 0).astype(int)
        vi = np.where(inside, v, 0).astype(int)
        return vi, ui, inside & self.valid[vi, ui]

    def planes_at(self, uv: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized plane_at: (normals, d, valid); out-of-image pixels are invalid."""
        vi, ui, valid = self._lookup(uv)
        normals = np.where(valid[:, None], self.normal[vi, ui], np.nan)
        d = -np.einsum("ni,ni->n", normals, np.where(valid[:, None], self.vertex[vi, ui], np.nan))
        return normals, d, valid

    def depths_at(self, uv: np.ndarray) -> np.ndarray:
        """Vectorized depth_at; NaN where invalid or outside."""
        vi, ui, valid = self._lookup(uv)
        return np.where(valid, self.depth[vi, ui], np.nan)

    def radii_at(self, uv: np.ndarray) -> np.ndarray:
        """Radius of the surfel seen at each pixel; NaN where invalid or outside."""
        vi, ui, valid = self._lookup(uv)
        return np.where(valid, self.radius[vi, ui], np.nan)


def _bounding_boxes(
    pc: np.ndarray, radii: np.ndarray, K: CameraIntrinsics, near: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Conservative pixel boxes of each surfel's bounding sphere."""
    z_lo = np.maximum(pc[:, 2] - radii, near)
    z_hi = pc[:, 2] + radii
    x_ext = np.stack([pc[:, 0] - radii, pc[:, 0] + radii], axis=1)
    y_ext = np.stack([pc[:, 1] - radii, pc[:, 1] + radii], axis=1)
    z_ext = np.stack([z_lo, z_hi], axis=1)
    xs = (x_ext[:, :, None] / z_ext[:, None, :]).reshape(len(pc), -1)
    ys = (y_ext[:, :, None] / z_ext[:, None, :]).reshape(len(pc), -1)
    u0 = np.floor(K.fx * xs.min(axis=1) + K.cx)
    u1 = np.ceil(K.fx * xs.max(axis=1) + K.cx)
    v0 = np.floor(K.fy * ys.min(axis=1) + K.cy)
    v1 = np.ceil(K.fy * ys.max(axis=1) + K.cy)
    return u0, u1, v0, v1


def _rasterize_chunk(
    ids: np.ndarray,
    pc: np.ndarray,
    nc: np.ndarray,
    radii: np.ndarray,
    boxes: Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    K: CameraIntrinsics,
    near: float,
    far: float,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest ray-disk hit per pixel within one chunk: (pixel, depth, surfel id)."""
    u0, u1, v0, v1 = boxes
    widths = u1 - u0 + 1
    counts = widths * (v1 - v0 + 1)
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, np.int64), np.empty(0), np.empty(0, np.int64)

    owner = np.repeat(np.arange(len(ids)), counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(total) - starts
    w_rep = widths[owner]
    u = u0[owner] + local % w_rep
    v = v0[owner] + local // w_rep

    rays = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones(total)], axis=1)
    n = nc[owner]
    p = pc[owner]
    denom = np.einsum("ij,ij->i", n, rays)
    usable = np.abs(denom) > 1e-12
    s = np.where(usable, np.einsum("ij,ij->i", n, p) / np.where(usable, denom, 1.0), -1.0)
    hit = usable & (s > near) & (s < far)
    offset = rays * s[:, None] - p
    hit &= np.einsum("ij,ij->i", offset, offset) <= radii[owner] ** 2

    pix = (v * K.width + u)[hit]
    depth = s[hit]
    surfel = ids[owner[hit]]
    order = np.lexsort((surfel, depth, pix))
    pix, depth, surfel = pix[order], depth[order], surfel[order]
    _, first = np.unique(pix, return_index=True)
    return pix[first], depth[first], surfel[first]


def render(
    surfel_map: SurfelMap,
    T_w_c: Pose,
    K: CameraIntrinsics,
    config: Optional[RenderConfig] = None,
) -> RenderedMaps:
    """Rasterize surfels as oriented disks with a z-buffer (ties go to the lower index)."""
    config = config or RenderConfig()
    near, far = config.near_clip, config.far_clip
    T_c_w = T_w_c.inverse()
    pc_all = T_c_w.apply(surfel_map.positions)
    nc_all = surfel_map.normals @ T_c_w.rotation.T
    radii_all = surfel_map.radii

    keep = (pc_all[:, 2] + radii_all > near) & (pc_all[:, 2] - radii_all < far)
    if config.backface_culling:
        keep &= np.einsum("ij,ij->i", nc_all, pc_all) < 0
    ids = np.flatnonzero(keep)

    n_pix = K.width * K.height
    best_depth = np.full(n_pix, np.inf)
    best_id = np.full(n_pix, -1, dtype=np.int64)

    if len(ids):
        u0, u1, v0, v1 = _bounding_boxes(pc_all[ids], radii_all[ids], K, near)
        in_view = (u1 >= 0) & (u0 <= K.width - 1) & (v1 >= 0) & (v0 <= K.height - 1)
        ids = ids[in_view]
        boxes = (
            np.clip(u0[in_view], 0, K.width - 1).astype(np.int64),
            np.clip(u1[in_view], 0, K.width - 1).astype(np.int64),
            np.clip(v0[in_view], 0, K.height - 1).astype(np.int64),
            np.clip(v1[in_view], 0, K.height - 1).astype(np.int64),
        )
        counts = (boxes[1] - boxes[0] + 1) * (boxes[3] - boxes[2] + 1)
        chunk_of = np.cumsum(counts) // MAX_PAIRS_PER_CHUNK
        for chunk in np.unique(chunk_of):
            sel = chunk_of == chunk
            cid = ids[sel]
            pix, depth, surfel = _rasterize_chunk(
                cid,
                pc_all[cid],
                nc_all[cid],
                radii_all[cid],
                tuple(b[sel] for b in boxes),
                K,
                near,
                far,
            )
            better = depth < best_depth[pix]
            best_depth[pix[better]] = depth[better]
            best_id[pix[better]] = surfel[better]

    valid = best_id >= 0
    depth = np.where(valid, best_depth, 0.0).reshape(K.height, K.width)
    vertex = np.full((n_pix, 3), np.nan)
    normal = np.full((n_pix, 3), np.nan)
    radius = np.zeros(n_pix)
    vertex[valid] = surfel_map.positions[best_id[valid]]
    normal[valid] = surfel_map.normals[best_id[valid]]
    radius[valid] = surfel_map.radii[best_id[valid]]
    maps = RenderedMaps(
        depth=depth,
        vertex=vertex.reshape(K.height, K.width, 3),
        normal=normal.reshape(K.height, K.width, 3),
        valid=valid.reshape(K.height, K.width),
        surfel_index=best_id.reshape(K.height, K.width),
        radius=radius.reshape(K.height, K.width),
    )
    logger.debug(f"Rendered {len(ids)} candidate surfels, coverage {maps.coverage:.1%}")
    return maps


def write_raster(path: Union[str, Path], magic: bytes, raster: np.ndarray) -> None:
    """Float32 H x W x 3 raster behind an 8-byte (magic, width, height) header."""
    h, w = raster.shape[:2]
    with open(path, "wb") as f:
        f.write(RASTER_HEADER.pack(magic, w, h))
        f.write(np.ascontiguousarray(raster, dtype="<f4").tobytes())


def read_raster(path: Union[str, Path]) -> Tuple[bytes, np.ndarray]:
    raw = Path(path).read_bytes()
    magic, w, h = RASTER_HEADER.unpack_from(raw)
    data = np.frombuffer(raw, dtype="<f4", offset=RASTER_HEADER.size, count=w * h * 3)
    return magic, data.reshape(h, w, 3).astype(float)


def dump_maps(maps: RenderedMaps, out_dir: Union[str, Path], prefix: str = "render") -> None:
    """Write depth (16-bit PGM, millimeters), vertex and normal rasters."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_pgm16(out_dir / f"{prefix}_depth.pgm", maps.depth * 1000.0)
    write_raster(out_dir / f"{prefix}_vertex.bin", VERTEX_MAP_MAGIC, maps.vertex)
    write_raster(out_dir / f"{prefix}_normal.bin", NORMAL_MAP_MAGIC, maps.normal)
