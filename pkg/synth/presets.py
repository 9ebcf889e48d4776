"""Scene and trajectory presets."""
import logging
import math
from typing import Callable, Dict, List, Tuple

import numpy as np

from common.errors import SceneError
from common.geometry import CameraIntrinsics, Pose
from config.constants import ScenePreset
from synth.world import PlaneSpec, SceneSpec, look_at

logger = logging.getLogger(__name__)

EXPOSURE_PERIOD = 50
ROOM_HALF_WIDTH = 3.0
ROOM_HEIGHT = 3.0
CAMERA_HEIGHT = 1.5


def exposure_schedule(num_frames: int, variation: float = 0.0) -> List[Tuple[float, float, float]]:
    """Per-frame (exposure, a, b); exposure oscillates around 1 with relative amplitude `variation`."""
    if not 0 <= variation < 1:
        raise SceneError(f"Exposure variation must be in [0, 1), got {variation}")
    return [(1.0 + variation * math.sin(2.0 * math.pi * k / EXPOSURE_PERIOD), 0.0, 0.0) for k in range(num_frames)]


def box_room_planes(seed: int = 0, half_width: float = ROOM_HALF_WIDTH, height: float = ROOM_HEIGHT) -> List[PlaneSpec]:
    """Floor, ceiling and four walls with normals facing the inside."""
    w, h = half_width, height
    ex, ey, ez = np.eye(3)
    return [
        PlaneSpec.rectangle((-w, -w, 0.0), ex, ey, 2 * w, 2 * w, ez, seed),
        PlaneSpec.rectangle((-w, -w, h), ex, ey, 2 * w, 2 * w, -ez, seed + 1),
        PlaneSpec.rectangle((w, -w, 0.0), ey, ez, 2 * w, h, -ex, seed + 2),
        PlaneSpec.rectangle((-w, -w, 0.0), ey, ez, 2 * w, h, ex, seed + 3),
        PlaneSpec.rectangle((-w, w, 0.0), ex, ez, 2 * w, h, -ey, seed + 4),
        PlaneSpec.rectangle((-w, -w, 0.0), ex, ez, 2 * w, h, ey, seed + 5),
    ]


def box_room_trajectory(num_frames: int, radius: float = 1.0, pitch_deg: float = -15.0) -> List[Pose]:
    """One outward-looking revolution at camera height."""
    poses = []
    for k in range(num_frames):
        angle = 2.0 * math.pi * k / num_frames
        eye = np.array([radius * math.cos(angle), radius * math.sin(angle), CAMERA_HEIGHT])
        forward = np.array([math.cos(angle), math.sin(angle), math.tan(math.radians(pitch_deg))])
        poses.append(look_at(eye, eye + forward))
    return poses


def orbit_trajectory(num_frames: int, radius: float = 1.5, target_height: float = 1.0) -> List[Pose]:
    """One inward-looking revolution around the room center."""
    target = np.array([0.0, 0.0, target_height])
    poses = []
    for k in range(num_frames):
        angle = 2.0 * math.pi * k / num_frames
        eye = np.array([radius * math.cos(angle), radius * math.sin(angle), CAMERA_HEIGHT])
        poses.append(look_at(eye, target))
    return poses


def corridor_planes(seed: int = 0, half_width: float = 1.5, length: float = 24.0, height: float = ROOM_HEIGHT) -> List[PlaneSpec]:
    """Two facing walls y = +-half_width, nothing else."""
    ex, ey, ez = np.eye(3)
    return [
        PlaneSpec.rectangle((-2.0, half_width, 0.0), ex, ez, length, height, -ey, seed),
        PlaneSpec.rectangle((-2.0, -half_width, 0.0), ex, ez, length, height, ey, seed + 1),
    ]


def corridor_trajectory(num_frames: int, speed: float = 0.04, yaw_deg: float = 35.0, sway: float = 0.25) -> List[Pose]:
    """Walk along +x with a lateral sway and the gaze sweeping between the two walls."""
    poses = []
    for k in range(num_frames):
        eye = np.array([speed * k, sway * math.sin(2.0 * math.pi * k / 60.0), CAMERA_HEIGHT])
        yaw = math.radians(yaw_deg) * math.sin(2.0 * math.pi * k / 100.0)
        poses.append(look_at(eye, eye + np.array([math.cos(yaw), math.sin(yaw), 0.0])))
    return poses


def single_wall_planes(seed: int = 0, distance: float = 4.0) -> List[PlaneSpec]:
    ex, ey, ez = np.eye(3)
    return [PlaneSpec.rectangle((-6.0, distance, -1.5), ex, ez, 12.0, 6.0, -ey, seed)]


def single_wall_trajectory(num_frames: int, amplitude: float = 1.5) -> List[Pose]:
    """Sideways sweep facing the wall."""
    poses = []
    for k in range(num_frames):
        phase = 2.0 * math.pi * k / num_frames
        eye = np.array([amplitude * math.sin(phase), 0.0, CAMERA_HEIGHT + 0.2 * math.sin(2.0 * phase)])
        poses.append(look_at(eye, eye + np.array([0.0, 1.0, 0.0])))
    return poses


def _box_room(n: int, seed: int) -> Tuple[List[PlaneSpec], List[Pose]]:
    return box_room_planes(seed), box_room_trajectory(n)


def _orbit(n: int, seed: int) -> Tuple[List[PlaneSpec], List[Pose]]:
    return box_room_planes(seed), orbit_trajectory(n)


def _corridor(n: int, seed: int) -> Tuple[List[PlaneSpec], List[Pose]]:
    return corridor_planes(seed), corridor_trajectory(n)


def _single_wall(n: int, seed: int) -> Tuple[List[PlaneSpec], List[Pose]]:
    return single_wall_planes(seed), single_wall_trajectory(n)


PRESETS: Dict[ScenePreset, Callable[[int, int], Tuple[List[PlaneSpec], List[Pose]]]] = {
    ScenePreset.BOX_ROOM: _box_room,
    ScenePreset.ORBIT: _orbit,
    ScenePreset.CORRIDOR: _corridor,
    ScenePreset.SINGLE_WALL: _single_wall,
}


def build_preset(
    preset: ScenePreset,
    K: CameraIntrinsics,
    num_frames: int,
    frame_rate: float = 20.0,
    seed: int = 0,
    exposure_variation: float = 0.0,
) -> SceneSpec:
    """Scene description of a named preset."""
    if num_frames <= 0:
        raise SceneError(f"Number of frames must be positive, got {num_frames}")
    planes, poses = PRESETS[ScenePreset(preset)](num_frames, seed)
    return SceneSpec(
        planes=planes,
        K=K,
        poses=poses,
        timestamps=[k / frame_rate for k in range(num_frames)],
        exposures=exposure_schedule(num_frames, exposure_variation),
        name=ScenePreset(preset).value,
    )
