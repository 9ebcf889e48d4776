"""Region-adaptive gradient-based candidate selection."""
import logging
import math

import numpy as np

from common.image import gradients

logger = logging.getLogger(__name__)

DEFAULT_BORDER = 4


def block_thresholds(grad_norm: np.ndarray, block_size: int = 32, add: float = 3.0) -> np.ndarray:
    """Per-pixel threshold: median gradient of the pixel's block plus `add`."""
    h, w = grad_norm.shape
    thresholds = np.empty_like(grad_norm)
    for v0 in range(0, h, block_size):
        for u0 in range(0, w, block_size):
            block = grad_norm[v0 : v0 + block_size, u0 : u0 + block_size]
            thresholds[v0 : v0 + block_size, u0 : u0 + block_size] = np.median(block) + add
    return thresholds


def select_candidates(
    image: np.ndarray,
    density: int = 400,
    block_size: int = 32,
    grad_add: float = 3.0,
    border: int = DEFAULT_BORDER,
) -> np.ndarray:
    """Pick about `density` well-spread high-gradient pixels.

    The image is split into square cells of side sqrt(W*H/density); each cell
    keeps its strongest pixel among those above the block threshold.
    Returns an (N, 2) array of (u, v) integer pixels sorted by (v, u).
    """
    image = np.asarray(image, dtype=float)
    h, w = image.shape
    if density <= 0:
        return np.empty((0, 2))
    gx, gy = gradients(image)
    grad_norm = np.sqrt(gx**2 + gy**2)
    eligible = grad_norm > block_thresholds(grad_norm, block_size, grad_add)
    eligible[:border] = eligible[h - border :] = False
    eligible[:, :border] = eligible[:, w - border :] = False

    vs, us = np.nonzero(eligible)
    if len(us) == 0:
        logger.debug("No pixel above the gradient threshold")
        return np.empty((0, 2))

    cell = math.sqrt(w * h / density)
    cells_x = int(math.ceil(w / cell))
    cell_id = (vs // cell).astype(np.int64) * cells_x + (us // cell).astype(np.int64)
    order = np.lexsort((-grad_norm[vs, us], cell_id))
    _, first = np.unique(cell_id[order], return_index=True)
    chosen = order[first]
    pixels = np.stack([us[chosen], vs[chosen]], axis=1).astype(float)
    pixels = pixels[np.lexsort((pixels[:, 0], pixels[:, 1]))]
    logger.debug(f"Selected {len(pixels)} candidates (density {density}, cell {cell:.1f} px)")
    return pixels
