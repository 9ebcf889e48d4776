"""Image pyramids, interpolation and PGM file I/O."""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import map_coordinates

from common.errors import ImageReadError

logger = logging.getLogger(__name__)


def downsample(image: np.ndarray) -> np.ndarray:
    """Halve resolution by 2x2 averaging (odd trailing row/column dropped)."""
    h, w = image.shape[0] // 2 * 2, image.shape[1] // 2 * 2
    im = image[:h, :w]
    return 0.25 * (im[0::2, 0::2] + im[1::2, 0::2] + im[0::2, 1::2] + im[1::2, 1::2])


def gradients(image: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Central-difference gradients (gx, gy)."""
    gy, gx = np.gradient(image)
    return gx, gy


def sample(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear intensity at subpixel coordinates uv (..., 2); clamps at the border."""
    uv = np.asarray(uv, dtype=float)
    coords = np.stack([uv[..., 1].ravel(), uv[..., 0].ravel()])
    values = map_coordinates(image, coords, order=1, mode="nearest")
    return values.reshape(uv.shape[:-1])


@dataclass(frozen=True)
class PyramidLevel:
    image: np.ndarray
    gx: np.ndarray
    gy: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.image.shape

    def sample(self, uv: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Intensity and gradient at uv."""
        return sample(self.image, uv), sample(self.gx, uv), sample(self.gy, uv)


@dataclass(frozen=True)
class ImagePyramid:
    """Intensity pyramid with precomputed gradients, level 0 is full resolution."""

    levels: List[PyramidLevel]

    @classmethod
    def from_image(cls, image: np.ndarray, num_levels: int = 1) -> "ImagePyramid":
        image = np.asarray(image, dtype=float)
        levels = []
        for lvl in range(num_levels):
            if lvl > 0:
                image = downsample(image)
            gx, gy = gradients(image)
            levels.append(PyramidLevel(image, gx, gy))
        return cls(levels)

    def __getitem__(self, level: int) -> PyramidLevel:
        return self.levels[level]

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def image(self) -> np.ndarray:
        return self.levels[0].image


def read_pgm(path: Union[str, Path], frame_index: int = None) -> np.ndarray:
    """Read an 8- or 16-bit grayscale image as float array."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "I", "I;16", "I;16B"):
                im = im.convert("L")
            return np.asarray(im, dtype=float)
    except (OSError, UnidentifiedImageError, ValueError) as e:
        raise ImageReadError(f"Cannot read image {path}: {e}", frame_index=frame_index) from e


def write_pgm(path: Union[str, Path], image: np.ndarray) -> None:
    """Write an 8-bit PGM (values clipped to 0..255)."""
    data = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PPM")


def write_pgm16(path: Union[str, Path], image: np.ndarray) -> None:
    """Write a 16-bit PGM (values clipped to 0..65535)."""
    data = np.clip(np.rint(image), 0, 65535).astype(np.int32)
    Image.fromarray(data, mode="I").save(path, format="PPM")
