"""Tests for run configuration loading."""
import numpy as np
import pytest
from pydantic import ValidationError

from common.errors import ConfigError
from config.constants import PointMarginalization, ScenePreset
from config.settings import OptimizerConfig, RenderConfig, Settings, TrackerConfig, load_settings


def test_defaults_are_valid():
    """Default settings describe a 160x120 camera and the box room."""
    s = Settings()
    assert s.camera.width == 160 and s.camera.height == 120
    assert s.PRESET == ScenePreset.BOX_ROOM
    assert s.rpe_segments == [1.0, 2.0, 4.0]
    assert s.initial_pose is None


def test_file_then_overrides(tmp_path):
    """Overrides win over the run file, which wins over defaults."""
    path = tmp_path / "run.env"
    path.write_text("HUBER_GAMMA=12\nWINDOW_SIZE=5\n# comment\nPRESET=corridor\n")
    s = load_settings(path, {"WINDOW_SIZE": "6"})
    assert s.HUBER_GAMMA == 12.0
    assert s.WINDOW_SIZE == 6
    assert s.PRESET == ScenePreset.CORRIDOR


def test_unknown_key_is_config_error(tmp_path):
    """Unknown keys are rejected with the usage exit code."""
    with pytest.raises(ConfigError) as exc:
        load_settings(overrides={"NOT_A_KEY": "1"})
    assert exc.value.exit_code == 2


@pytest.mark.parametrize(
    "overrides",
    [
        {"ASSOCIATE_PIXEL_DIST": "6"},
        {"ASSOCIATE_THETA": "0.6"},
        {"WINDOW_SIZE": "1"},
        {"NEAR_CLIP": "10", "FAR_CLIP": "5"},
        {"CX": "500"},
        {"LOG_LEVEL": "LOUD"},
        {"RPE_SEGMENTS": "0,1"},
        {"HUBER_GAMMA": "abc"},
    ],
)
def test_invalid_values(overrides):
    """Inconsistent thresholds and malformed values are config errors."""
    with pytest.raises(ConfigError):
        load_settings(overrides=overrides)


def test_missing_file():
    """A named run file must exist."""
    with pytest.raises(ConfigError):
        load_settings("/nonexistent/run.env")


def test_env_text_round_trip(tmp_path):
    """Settings written as KEY=value lines load back unchanged."""
    s = load_settings(
        overrides={"INITIAL_POSE": "1 2 3 0 0 0 1", "PRESET": "orbit", "POINT_MARGINALIZATION": "discard"}
    )
    path = tmp_path / "run.env"
    path.write_text(s.to_env_text())
    assert load_settings(path).model_dump() == s.model_dump()


def test_initial_pose_parsing():
    """INITIAL_POSE is a TUM pose; wrong arity is a config error."""
    s = load_settings(overrides={"INITIAL_POSE": "1 2 3 0 0 0 1"})
    assert np.allclose(s.initial_pose.translation, [1.0, 2.0, 3.0])
    assert np.allclose(s.initial_pose.rotation, np.eye(3))
    with pytest.raises(ConfigError):
        load_settings(overrides={"INITIAL_POSE": "1 2 3"}).initial_pose


def test_component_configs_follow_settings():
    """Tracker, optimizer and render views copy their settings."""
    s = load_settings(
        overrides={"HUBER_GAMMA": "7", "WINDOW_SIZE": "5", "FAR_CLIP": "20", "POINT_MARGINALIZATION": "discard"}
    )
    assert TrackerConfig.from_settings(s).huber_gamma == 7.0
    optimizer = OptimizerConfig.from_settings(s)
    assert optimizer.window_size == 5
    assert optimizer.point_marginalization == PointMarginalization.DISCARD
    assert RenderConfig.from_settings(s).far_clip == 20.0


def test_tracker_config_threshold_order():
    """Association thresholds must be tighter than the outlier ones."""
    with pytest.raises(ValidationError):
        TrackerConfig(associate_pixel_dist=6.0)
    with pytest.raises(ValidationError):
        TrackerConfig(outlier_theta=0.1)
