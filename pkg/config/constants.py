"""Application constants."""
from enum import Enum

import numpy as np


class PointStatus(str, Enum):
    """Tracked point lifecycle status."""
    CANDIDATE = "candidate"
    ACTIVE = "active"
    ASSOCIATED = "associated"
    OUTLIER = "outlier"


class DegeneracyClass(str, Enum):
    """Geometry class of the surfel constraints in a window."""
    PURE_VISUAL = "PureVisual"
    SINGLE_PLANE = "SinglePlane"
    PARALLEL_PLANES = "ParallelPlanes"
    COPLANAR_NORMALS = "CoplanarNormals"
    WELL_CONSTRAINED = "WellConstrained"


class KeyframeDecision(str, Enum):
    """Outcome of the keyframe test for a tracked frame."""
    KEEP = "keep"
    NEW_KEYFRAME = "new_keyframe"


class PointMarginalization(str, Enum):
    """What happens to free-depth points hosted in a marginalized frame."""
    MARGINALIZE = "marginalize"
    DISCARD = "discard"


class ScenePreset(str, Enum):
    """Synthetic scene presets."""
    BOX_ROOM = "box-room"
    ORBIT = "orbit"
    CORRIDOR = "corridor"
    SINGLE_WALL = "single-wall"


# Residual pattern: 8 pixels around the point (center included), (du, dv)
PATCH_PATTERN = np.array(
    [
        [0, -2],
        [-1, -1],
        [1, -1],
        [-2, 0],
        [0, 0],
        [2, 0],
        [-1, 1],
        [0, 2],
    ],
    dtype=float,
)
PATCH_CENTER_INDEX = 4
PATCH_RADIUS = 2

# Nullspace dimension of each geometry class when the planes share no common point
GAUGE_DIMENSIONS = {
    DegeneracyClass.PURE_VISUAL: 7,
    DegeneracyClass.SINGLE_PLANE: 4,
    DegeneracyClass.PARALLEL_PLANES: 3,
    DegeneracyClass.COPLANAR_NORMALS: 1,
    DegeneracyClass.WELL_CONSTRAINED: 0,
}

# Exit codes
EXIT_OK = 0
EXIT_ALGORITHM_FAILURE = 1
EXIT_USAGE = 2

# Raster dump magics (4 bytes, followed by uint16 width and height)
VERTEX_MAP_MAGIC = b"SVTX"
NORMAL_MAP_MAGIC = b"SNRM"

# File names inside a simulated sequence directory
SEQUENCE_INDEX_FILE = "index.txt"
SEQUENCE_FRAMES_DIR = "frames"
GROUNDTRUTH_FILE = "groundtruth.txt"
MAP_FILE = "map.ply"
RUN_CONFIG_FILE = "run.env"

METRICS_CSV_HEADER = ["metric", "value", "count"]
OPTIMIZER_CSV_HEADER = ["iteration", "energy_surfel", "energy_non", "damping", "step_norm"]
CONSTRAINT_CSV_HEADER = [
    "frame_id",
    "keyframe_id",
    "surfel_constraints",
    "total_constraints",
    "ratio",
    "eig_ratio_21",
    "eig_ratio_31",
]
