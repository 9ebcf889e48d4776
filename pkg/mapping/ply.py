"""PLY reading and writing of vertex-only point and surfel files."""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from plyfile import PlyData, PlyElement, PlyListProperty, PlyParseError

from common.errors import MapFormatError

logger = logging.getLogger(__name__)


def read_ply(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], List[str]]:
    """Read vertex columns (as float) and header comments."""
    try:
        plydata = PlyData.read(str(path))
    except OSError as e:
        raise MapFormatError(f"Cannot read {path}: {e}") from e
    except PlyParseError as e:
        raise MapFormatError(f"Malformed PLY {path}: {e}", record=getattr(e, "row", None)) from e
    except (ValueError, EOFError) as e:
        raise MapFormatError(f"Malformed PLY {path}: {e}") from e

    try:
        vertex = plydata["vertex"]
    except KeyError:
        raise MapFormatError(f"PLY file {path} has no vertex element")
    if any(isinstance(prop, PlyListProperty) for prop in vertex.properties):
        raise MapFormatError("List properties on vertices are not supported")
    if not vertex.properties:
        raise MapFormatError(f"PLY file {path} has no vertex properties")

    columns = {prop.name: np.asarray(vertex[prop.name], dtype=float) for prop in vertex.properties}
    for name, col in columns.items():
        bad = np.flatnonzero(~np.isfinite(col))
        if bad.size:
            raise MapFormatError(f"Non-finite value in '{name}'", record=int(bad[0]))
    return columns, list(plydata.comments)


def write_ply(
    path: Union[str, Path],
    columns: Dict[str, np.ndarray],
    comments: Optional[List[str]] = None,
) -> None:
    """Write float32 vertex columns as binary little-endian PLY."""
    names = list(columns)
    count = len(columns[names[0]]) if names else 0
    records = np.empty(count, dtype=[(name, "f4") for name in names])
    for name in names:
        records[name] = columns[name]
    el = PlyElement.describe(records, "vertex")
    PlyData([el], byte_order="<", comments=list(comments or [])).write(str(path))
    logger.debug(f"Wrote {count} vertices to {path}")


def read_point_cloud(path: Union[str, Path]) -> np.ndarray:
    """(N, 3) positions of a PLY point cloud."""
    columns, _ = read_ply(path)
    missing = [c for c in ("x", "y", "z") if c not in columns]
    if missing:
        raise MapFormatError(f"Point cloud lacks properties {missing}")
    return np.stack([columns["x"], columns["y"], columns["z"]], axis=1)
