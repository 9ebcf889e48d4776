"""Tests for surfel map building and PLY storage."""
import math

import numpy as np
import pytest
from plyfile import PlyData, PlyElement

from common.errors import MapBuildError, MapFormatError
from mapping.ply import read_ply, read_point_cloud, write_ply
from mapping.surfel_map import (
    SurfelMap,
    build_surfel_map,
    estimate_normals_pca,
    load_map,
    save_map,
    surfel_radius,
    voxel_downsample,
)
from tests.conftest import grid_plane_points


def test_voxel_downsample_counts_occupied_voxels(plane_points):
    """A 1 m x 1 m grid in 0.25 m voxels occupies 16 voxels."""
    centers = voxel_downsample(plane_points, 0.25)
    assert len(centers) == 16
    assert np.allclose(centers[:, 2], 0.0)


def test_voxel_downsample_rejects_bad_size(plane_points):
    """Voxel size must be positive."""
    with pytest.raises(MapBuildError):
        voxel_downsample(plane_points, 0.0)


def test_pca_normals_face_viewpoint(plane_points):
    """Normals of a plane are +-z and point towards the viewpoint."""
    normals, valid = estimate_normals_pca(plane_points, k=10, viewpoint=np.array([0.5, 0.5, -3.0]))
    assert valid.all()
    assert np.allclose(normals, [0.0, 0.0, -1.0], atol=1e-9)


def test_pca_collinear_neighborhood_invalid():
    """Points on a line have no normal."""
    points = np.stack([np.linspace(0, 1, 30), np.zeros(30), np.zeros(30)], axis=1)
    _, valid = estimate_normals_pca(points, k=5)
    assert not valid.any()


def test_build_map_radius_and_count(plane_points):
    """Surfel radius covers the voxel footprint."""
    surfel_map = build_surfel_map(plane_points, 0.25, k=5, viewpoint=np.array([0.5, 0.5, 1.0]))
    assert len(surfel_map) == 16
    assert surfel_map.is_valid()
    assert surfel_map.radii[0] == pytest.approx(0.25 * math.sqrt(2.0) / 2.0)
    assert surfel_radius(0.2) == pytest.approx(0.1414213562, abs=1e-9)


def test_build_map_empty_cloud():
    """An empty cloud cannot be mapped."""
    with pytest.raises(MapBuildError):
        build_surfel_map(np.empty((0, 3)), 0.1)


def test_build_map_deterministic(plane_points):
    """Identical inputs give identical maps."""
    a = build_surfel_map(plane_points, 0.1)
    b = build_surfel_map(plane_points, 0.1)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.normals, b.normals)


def test_map_is_immutable(plane_points):
    """Surfel arrays are read-only."""
    surfel_map = build_surfel_map(plane_points, 0.25, k=5)
    with pytest.raises(ValueError):
        surfel_map.positions[0, 0] = 1.0


def test_save_load_map(tmp_path, plane_points):
    """Maps survive a PLY round trip within float32 precision."""
    surfel_map = build_surfel_map(plane_points, 0.25, k=5)
    save_map(surfel_map, tmp_path / "map.ply")
    loaded = load_map(tmp_path / "map.ply")
    assert len(loaded) == len(surfel_map)
    assert loaded.voxel_size == pytest.approx(0.25)
    assert np.allclose(loaded.positions, surfel_map.positions, atol=1e-6)
    assert np.allclose(np.linalg.norm(loaded.normals, axis=1), 1.0)


def test_load_map_without_radius_uses_voxel(tmp_path):
    """Radius defaults from the voxel size comment."""
    columns = {"x": np.zeros(2), "y": np.ones(2), "z": np.zeros(2), "nx": np.zeros(2), "ny": np.zeros(2), "nz": np.ones(2)}
    write_ply(tmp_path / "m.ply", columns, comments=["voxel_size 0.2"])
    assert np.allclose(load_map(tmp_path / "m.ply").radii, surfel_radius(0.2))


def test_load_map_bad_normal_reports_record(tmp_path):
    """Non-unit normals are rejected with their record index."""
    columns = {
        "x": np.zeros(3), "y": np.zeros(3), "z": np.zeros(3),
        "nx": np.zeros(3), "ny": np.zeros(3), "nz": np.array([1.0, 0.5, 1.0]),
        "radius": np.ones(3),
    }
    write_ply(tmp_path / "m.ply", columns)
    with pytest.raises(MapFormatError) as exc:
        load_map(tmp_path / "m.ply")
    assert exc.value.record == 1


def test_read_ascii_point_cloud(tmp_path):
    """ASCII PLY point clouds are readable."""
    path = tmp_path / "cloud.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
        "property float z\nend_header\n1 2 3\n4 5 6\n"
    )
    assert np.allclose(read_point_cloud(path), [[1, 2, 3], [4, 5, 6]])


def test_truncated_ply(tmp_path):
    """Truncated binary data is a format error."""
    write_ply(tmp_path / "c.ply", {"x": np.zeros(4), "y": np.zeros(4), "z": np.zeros(4)})
    raw = (tmp_path / "c.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(raw[:-5])
    with pytest.raises(MapFormatError):
        read_ply(tmp_path / "t.ply")


def test_missing_file():
    """Missing files are format errors (exit code 2)."""
    with pytest.raises(MapFormatError) as exc:
        read_point_cloud("/nonexistent/cloud.ply")
    assert exc.value.exit_code == 2


def test_two_plane_cloud_gives_both_normals():
    """Surfels of two orthogonal planes carry the two plane normals."""
    floor = grid_plane_points(0.05, 1.0, 0.0)
    wall = floor[:, [0, 2, 1]] + np.array([0.0, 2.0, 0.0])
    surfel_map = build_surfel_map(np.vstack([floor, wall]), 0.2, k=8, viewpoint=np.array([0.5, 1.0, 0.5]))
    abs_normals = np.abs(surfel_map.normals)
    assert np.all(np.isclose(abs_normals[:, 2], 1.0, atol=1e-6) | np.isclose(abs_normals[:, 1], 1.0, atol=1e-6))
    assert isinstance(surfel_map, SurfelMap)


def test_ply_header_written_by_save(tmp_path, plane_points):
    """Saved maps are binary little-endian PLY with float vertex properties and the voxel comment."""
    save_map(build_surfel_map(plane_points, 0.25, k=5), tmp_path / "map.ply")
    plydata = PlyData.read(str(tmp_path / "map.ply"))
    assert plydata.byte_order == "<"
    assert [p.name for p in plydata["vertex"].properties] == ["x", "y", "z", "nx", "ny", "nz", "radius"]
    assert any(c.startswith("voxel_size") for c in plydata.comments)


def test_read_big_endian_double_cloud(tmp_path):
    """Big-endian clouds with double properties read as float columns."""
    records = np.array([(1.0, 2.0, 3.0), (4.0, 5.0, 6.0)], dtype=[("x", "f8"), ("y", "f8"), ("z", "f8")])
    PlyData([PlyElement.describe(records, "vertex")], byte_order=">").write(str(tmp_path / "be.ply"))
    assert np.allclose(read_point_cloud(tmp_path / "be.ply"), [[1, 2, 3], [4, 5, 6]])


def test_short_ascii_ply_reports_record(tmp_path):
    """An ASCII body shorter than its vertex count names the first missing record."""
    path = tmp_path / "short.ply"
    path.write_text(
        "ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
        "property float z\nend_header\n1 2 3\n4 5 6\n"
    )
    with pytest.raises(MapFormatError) as exc:
        read_point_cloud(path)
    assert exc.value.record == 2
