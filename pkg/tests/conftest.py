"""Shared synthetic fixtures."""
import numpy as np
import pytest

from common.geometry import CameraIntrinsics
from config.constants import ScenePreset
from synth.presets import build_preset
from synth.world import make_scene


def grid_plane_points(spacing: float = 0.05, extent: float = 1.0, z: float = 0.0) -> np.ndarray:
    """Regular grid of points on the plane z = const."""
    s = np.arange(0.0, extent, spacing) + spacing / 2
    u, v = np.meshgrid(s, s)
    return np.stack([u.ravel(), v.ravel(), np.full(u.size, z)], axis=1)


@pytest.fixture
def camera():
    return CameraIntrinsics(60.0, 60.0, 39.5, 29.5, 80, 60)


@pytest.fixture
def plane_points():
    return grid_plane_points()


@pytest.fixture
def box_room(camera):
    """Box room scene with a short outward-looking trajectory."""
    return make_scene(build_preset(ScenePreset.BOX_ROOM, camera, num_frames=8))


@pytest.fixture
def smooth_image():
    """Smooth textured 120x160 image with strong gradients."""
    v, u = np.mgrid[0:120, 0:160].astype(float)
    return 128.0 + 50.0 * np.sin(u / 5.0) * np.cos(v / 7.0) + 30.0 * np.sin((u + v) / 11.0)
