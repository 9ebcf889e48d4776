"""Tests for candidate selection, tracking and keyframe management."""
import numpy as np
import pytest

from common.errors import InitializationError, NoIntersectionError, TrackingLostError
from common.geometry import PlaneCoeffs, Pose, so3_log
from common.image import ImagePyramid
from config.constants import KeyframeDecision, PointStatus, ScenePreset
from config.settings import TrackerConfig
from localization.frontend import (
    Frontend,
    constraint_counts,
    filter_and_associate,
    initialize,
    keyframe_decision,
    select_marginalization,
    surfel_induced_inverse_depth,
    theta,
)
from localization.point_selector import select_candidates
from localization.state import FrameState, TrackedPoint, WindowState
from mapping.renderer import render
from mapping.surfel_map import SurfelMap
from synth.presets import build_preset
from synth.world import make_scene, render_image, sample_surfel_map

TRACKER = TrackerConfig(pyramid_levels=3, candidate_density=300)


@pytest.fixture
def slow_room(camera):
    """Box room with small inter-frame motion."""
    return make_scene(build_preset(ScenePreset.BOX_ROOM, camera, num_frames=120))


def pose_error(estimate, truth):
    """(translation error in m, rotation error in rad) between two T_w_c."""
    delta = truth.inverse() @ estimate
    return float(np.linalg.norm(delta.translation)), float(np.linalg.norm(so3_log(delta.rotation)))


def test_theta_symmetry_and_range():
    """theta is symmetric, zero for equal depths and below one."""
    assert theta(1.0, 2.0) == pytest.approx(0.5)
    assert theta(2.0, 1.0) == pytest.approx(0.5)
    assert theta(0.3, 0.3) == 0.0
    values = theta(np.array([0.1, 1.0]), np.array([10.0, 1.5]))
    assert np.all((values >= 0) & (values < 1))


def test_surfel_induced_depth_and_target_pixels(camera):
    """The host ray meets a fronto-parallel plane at its depth; targets see the point shifted."""
    plane = PlaneCoeffs([0.0, 0.0, -1.0], 2.0)
    center = np.array([camera.cx, camera.cy])
    shifted = Pose(np.eye(3), [-0.2, 0.0, 0.0])
    rho, pixels = surfel_induced_inverse_depth(center, plane, Pose.identity(), camera, targets=[shifted])
    assert rho == pytest.approx(0.5)
    assert np.allclose(pixels[0], [camera.cx - camera.fx * 0.1, camera.cy])


def test_surfel_induced_depth_failures(camera):
    """Parallel rays, planes through the center and out-of-range depths have no intersection."""
    center = np.array([camera.cx, camera.cy])
    with pytest.raises(NoIntersectionError):
        surfel_induced_inverse_depth(center, PlaneCoeffs([1.0, 0.0, 0.0], -1.0), Pose.identity(), camera)
    with pytest.raises(NoIntersectionError):
        surfel_induced_inverse_depth(center, PlaneCoeffs([1.0, 0.0, 0.0], 0.0), Pose.identity(), camera)
    with pytest.raises(NoIntersectionError):
        surfel_induced_inverse_depth(center, PlaneCoeffs([0.0, 0.0, -1.0], 2.0), Pose.identity(), camera, far=1.5)


def test_associated_point_uses_plane_depth(camera):
    """Once associated, a point reports the plane-induced depth of its host pose and cannot go back."""
    point = TrackedPoint(0, 0, [camera.cx, camera.cy], 0.25, 0.01, status=PointStatus.ACTIVE)
    assert point.current_inv_depth(Pose.identity(), camera) == 0.25
    point.associate(PlaneCoeffs([0.0, 0.0, -1.0], 2.0))
    assert point.current_inv_depth(Pose.identity(), camera) == pytest.approx(0.5)
    # host 1 m closer to the plane
    host = Pose(np.eye(3), [0.0, 0.0, 1.0]).inverse()
    assert point.current_inv_depth(host, camera) == pytest.approx(1.0)
    assert point.history == [PointStatus.ACTIVE, PointStatus.ASSOCIATED]
    with pytest.raises(AssertionError):
        point.set_status(PointStatus.ACTIVE)


def test_select_candidates_spread(smooth_image):
    """Candidates are spread over cells, away from the border and sorted by row."""
    pixels = select_candidates(smooth_image, density=400)
    assert 100 < len(pixels) <= 400
    assert pixels[:, 0].min() >= 4 and pixels[:, 0].max() <= 160 - 5
    assert pixels[:, 1].min() >= 4 and pixels[:, 1].max() <= 120 - 5
    order = np.lexsort((pixels[:, 0], pixels[:, 1]))
    assert np.array_equal(order, np.arange(len(pixels)))
    assert len(np.unique(pixels, axis=0)) == len(pixels)


def test_select_candidates_deterministic_and_empty(smooth_image):
    """Selection is deterministic; flat images and zero density select nothing."""
    assert np.array_equal(select_candidates(smooth_image), select_candidates(smooth_image))
    assert len(select_candidates(np.full((60, 80), 100.0))) == 0
    assert len(select_candidates(smooth_image, density=0)) == 0


def test_keyframe_decision(camera):
    """No motion keeps the keyframe; a large translation asks for a new one."""
    pyramid = ImagePyramid.from_image(np.zeros((60, 80)), 1)
    last = FrameState(0, pyramid, Pose.identity())
    window = WindowState(camera, keyframes=[last])
    pixels = np.array([[20.0, 20.0], [60.0, 40.0], [40.0, 30.0]])
    inv_depths = np.full(3, 0.5)

    decision, score = keyframe_decision(window, FrameState(1, pyramid, Pose.identity()), pixels, inv_depths)
    assert decision == KeyframeDecision.KEEP
    assert score == pytest.approx(0.0)

    moved = FrameState(1, pyramid, Pose(np.eye(3), [0.3, 0.0, 0.0]))
    assert keyframe_decision(window, moved, pixels, inv_depths)[0] == KeyframeDecision.NEW_KEYFRAME
    assert keyframe_decision(window, moved, np.empty((0, 2)), np.empty(0))[0] == KeyframeDecision.NEW_KEYFRAME


def test_keyframe_decision_brightness_change(camera):
    """A large exposure change triggers a keyframe without motion."""
    pyramid = ImagePyramid.from_image(np.zeros((60, 80)), 1)
    window = WindowState(camera, keyframes=[FrameState(0, pyramid, Pose.identity())])
    darker = FrameState(1, pyramid, Pose.identity(), exposure_time=0.5)
    decision, _ = keyframe_decision(window, darker, np.array([[40.0, 30.0]]), np.array([0.5]))
    assert decision == KeyframeDecision.NEW_KEYFRAME


def test_select_marginalization_never_newest(camera):
    """Keyframes that see nothing of the newest one are dropped first, never the newest."""
    pyramid = ImagePyramid.from_image(np.zeros((60, 80)), 1)
    frames = [FrameState(i, pyramid, Pose(np.eye(3), [0.1 * i, 0.0, 0.0])) for i in range(4)]
    window = WindowState(camera, keyframes=frames)
    chosen = select_marginalization(window)
    assert chosen != frames[-1].frame_id
    assert chosen == 0


def test_initialize_keeps_points_active(slow_room, camera):
    """The first keyframe gets map-seeded points that stay active until a second keyframe sees them."""
    surfel_map = sample_surfel_map(slow_room, 0.2)
    pose = slow_room.spec.poses[0]
    image, _ = render_image(slow_room, pose, camera)
    window = initialize(image, pose, surfel_map, camera, TRACKER)

    assert len(window.keyframes) == 1
    live = window.points_with(PointStatus.ACTIVE, PointStatus.ASSOCIATED)
    assert len(live) > 50
    assert not window.points_with(PointStatus.ASSOCIATED)
    assert all(p.seeded for p in live)
    maps = render(surfel_map, pose, camera)
    for p in live[:20]:
        assert p.inv_depth == pytest.approx(1.0 / maps.depth_at(p.pixel))
    window.check_invariants()
    # a single keyframe has no targets yet
    assert constraint_counts(window) == (0, 0)


def test_initialize_from_offset_pose_associates_nothing(slow_room, camera):
    """A first pose 0.3 m off the truth still seeds points but associates none of them."""
    surfel_map = sample_surfel_map(slow_room, 0.2)
    truth = slow_room.spec.poses[0]
    image, _ = render_image(slow_room, truth, camera)
    offset = Pose(np.eye(3), [0.3, 0.0, 0.0]) @ truth
    window = initialize(image, offset, surfel_map, camera, TRACKER)

    live = window.points_with(PointStatus.ACTIVE, PointStatus.ASSOCIATED)
    associated = window.points_with(PointStatus.ASSOCIATED)
    assert len(live) > 0
    assert len(associated) < len(live)
    assert not associated


def _second_keyframe(window, scene, camera, pose, frame_id):
    image, _ = render_image(scene, pose, camera)
    frame = FrameState(frame_id, ImagePyramid.from_image(image, TRACKER.pyramid_levels), pose.inverse())
    window.keyframes.append(frame)
    return frame


def test_filter_without_targets_keeps_status(slow_room, camera):
    """With a single keyframe no point is classified."""
    surfel_map = sample_surfel_map(slow_room, 0.2)
    pose = slow_room.spec.poses[0]
    window = initialize(render_image(slow_room, pose, camera)[0], pose, surfel_map, camera, TRACKER)
    before = {p.point_id: p.status for p in window.points.values()}
    assert filter_and_associate(window, render(surfel_map, pose, camera), TRACKER) == {}
    assert {p.point_id: p.status for p in window.points.values()} == before


def test_filter_separates_wrong_depths(slow_room, camera):
    """Points with corrupted depths become outliers; the map-consistent ones are associated."""
    surfel_map = sample_surfel_map(slow_room, 0.2)
    poses = slow_room.spec.poses
    window = initialize(render_image(slow_room, poses[0], camera)[0], poses[0], surfel_map, camera, TRACKER)
    live = window.points_with(PointStatus.ACTIVE)
    corrupted = live[::2]
    for p in corrupted:
        p.inv_depth *= 3.0
    _second_keyframe(window, slow_room, camera, poses[10], 10)

    counts = filter_and_associate(window, render(surfel_map, poses[10], camera), TRACKER)
    assert counts.get("outlier", 0) >= 1
    assert not any(p.is_associated for p in corrupted)
    clean = live[1::2]
    assert sum(p.is_associated for p in clean) > 0.5 * len(clean)
    for p in clean:
        if p.is_associated:
            X_w = window.keyframes[0].T_w_c.apply(p.ray(camera) / p.inv_depth)
            assert abs(p.plane.normal @ X_w + p.plane.d) < 1e-6


def test_filter_ignores_dropped_targets(slow_room, camera):
    """Observations removed as outliers are not evidence for association."""
    surfel_map = sample_surfel_map(slow_room, 0.2)
    poses = slow_room.spec.poses
    window = initialize(render_image(slow_room, poses[0], camera)[0], poses[0], surfel_map, camera, TRACKER)
    _second_keyframe(window, slow_room, camera, poses[10], 10)
    for p in window.points.values():
        p.dropped_targets.add(10)
    filter_and_associate(window, render(surfel_map, poses[10], camera), TRACKER)
    assert not window.points_with(PointStatus.ASSOCIATED, PointStatus.OUTLIER)


def test_initialize_without_map_coverage(slow_room, camera):
    """A map the first camera cannot see fails initialization."""
    behind = SurfelMap([[0.0, 0.0, -5.0]], [[0.0, 0.0, 1.0]], [0.1])
    image, _ = render_image(slow_room, slow_room.spec.poses[0], camera)
    with pytest.raises(InitializationError):
        initialize(image, Pose.identity(), behind, camera, TRACKER)


def test_track_small_motion(slow_room, camera):
    """Direct alignment recovers the second pose from exact map depths."""
    surfel_map = sample_surfel_map(slow_room, 0.2)
    poses = slow_room.spec.poses
    frontend = Frontend(surfel_map, camera, TRACKER)
    frontend.start(render_image(slow_room, poses[0], camera)[0], poses[0])

    result = frontend.track_frame(render_image(slow_room, poses[1], camera)[0], frame_id=1)
    t_err, r_err = pose_error(result.frame.T_w_c, poses[1])
    assert t_err < 0.01
    assert r_err < np.radians(0.5)
    assert result.tracked_fraction > 0.5


def test_track_keyframe_image_against_itself(slow_room, camera):
    """Tracking the keyframe image itself returns the keyframe pose."""
    surfel_map = sample_surfel_map(slow_room, 0.2)
    pose = slow_room.spec.poses[0]
    image = render_image(slow_room, pose, camera)[0]
    frontend = Frontend(surfel_map, camera, TRACKER)
    frontend.start(image, pose)

    result = frontend.track_frame(image, frame_id=1)
    t_err, r_err = pose_error(result.frame.T_w_c, pose)
    assert t_err < 1e-6
    assert r_err < 1e-6
    assert abs(result.frame.a) < 1e-6 and abs(result.frame.b) < 1e-6


def test_track_constant_image_is_lost(slow_room, camera):
    """An image without gradients cannot be tracked."""
    surfel_map = sample_surfel_map(slow_room, 0.2)
    pose = slow_room.spec.poses[0]
    image = render_image(slow_room, pose, camera)[0]
    frontend = Frontend(surfel_map, camera, TRACKER)
    frontend.start(image, pose)
    with pytest.raises(TrackingLostError):
        frontend.track_frame(np.full_like(image, 128.0), frame_id=1)


@pytest.mark.slow
def test_frontend_short_sequence(slow_room, camera):
    """Processing a short sequence keeps every frame close to ground truth."""
    surfel_map = sample_surfel_map(slow_room, 0.2)
    poses = slow_room.spec.poses[:12]
    frontend = Frontend(surfel_map, camera, TRACKER)
    frontend.start(render_image(slow_room, poses[0], camera)[0], poses[0])
    keyframes = 0
    for k in range(1, len(poses)):
        record, update = frontend.process(render_image(slow_room, poses[k], camera)[0], frame_id=k, timestamp=k / 20.0)
        assert record.frame_id == k
        if update is not None:
            keyframes += 1
            assert update.total_constraints >= update.surfel_constraints
            assert frontend.window.prior.is_psd()
    trajectory = frontend.trajectory()
    assert len(trajectory) == len(poses)
    assert keyframes >= 1
    for (_, estimate), truth in zip(trajectory, poses):
        assert pose_error(estimate, truth)[0] < 0.05
