"""Tests for image pyramids and PGM I/O."""
import numpy as np
import pytest

from common.errors import ImageReadError
from common.image import ImagePyramid, downsample, read_pgm, sample, write_pgm, write_pgm16


def test_downsample_averages_blocks():
    """Each output pixel is the mean of a 2x2 block."""
    image = np.arange(16, dtype=float).reshape(4, 4)
    out = downsample(image)
    assert out.shape == (2, 2)
    assert out[0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)


def test_bilinear_sample_on_ramp():
    """Bilinear interpolation is exact on a linear ramp."""
    u, v = np.meshgrid(np.arange(20.0), np.arange(10.0))
    image = 3.0 * u + 2.0 * v
    values = sample(image, np.array([[2.5, 3.25], [10.1, 7.7]]))
    assert np.allclose(values, [3.0 * 2.5 + 2.0 * 3.25, 3.0 * 10.1 + 2.0 * 7.7])


def test_pyramid_levels_and_gradients():
    """Pyramid halves resolution per level and carries central-difference gradients."""
    u, _ = np.meshgrid(np.arange(64.0), np.arange(48.0))
    pyramid = ImagePyramid.from_image(2.0 * u, num_levels=3)
    assert len(pyramid) == 3
    assert pyramid[2].shape == (12, 16)
    assert np.allclose(pyramid[0].gx[:, 1:-1], 2.0)
    assert np.allclose(pyramid[0].gy, 0.0)


def test_pgm_round_trip(tmp_path):
    """8-bit PGM keeps integer intensities."""
    image = np.random.default_rng(0).integers(0, 256, size=(12, 20)).astype(float)
    write_pgm(tmp_path / "a.pgm", image)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), image)


def test_pgm16_keeps_large_values(tmp_path):
    """16-bit PGM stores values above 255."""
    image = np.array([[0.0, 1000.0], [65535.0, 300.0]])
    write_pgm16(tmp_path / "d.pgm", image)
    assert read_pgm(tmp_path / "d.pgm").max() == 65535.0


def test_corrupt_image_reports_frame(tmp_path):
    """Unreadable images raise ImageReadError with the frame index."""
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"not an image")
    with pytest.raises(ImageReadError) as exc:
        read_pgm(path, frame_index=7)
    assert exc.value.frame_index == 7
    assert "Frame #7" in str(exc.value)
