"""Simulated sequence directories: frames, index, ground truth, map and run config."""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np

from common.errors import ImageReadError, SceneError
from common.image import read_pgm, write_pgm
from config.constants import GROUNDTRUTH_FILE, MAP_FILE, RUN_CONFIG_FILE, SEQUENCE_FRAMES_DIR, SEQUENCE_INDEX_FILE
from evaluation.trajectory import Trajectory, write_tum
from mapping.surfel_map import SurfelMap, save_map
from synth.world import Scene, render_image

logger = logging.getLogger(__name__)

INDEX_HEADER = "# frame_id timestamp exposure a b"


@dataclass(frozen=True)
class IndexEntry:
    frame_id: int
    timestamp: float
    exposure: float
    a: float = 0.0
    b: float = 0.0


def frame_path(directory: Union[str, Path], frame_id: int) -> Path:
    return Path(directory) / SEQUENCE_FRAMES_DIR / f"{frame_id:06d}.pgm"


def write_index(path: Union[str, Path], entries: List[IndexEntry]) -> None:
    lines = [INDEX_HEADER] + [f"{e.frame_id} {e.timestamp:.6f} {e.exposure:.9g} {e.a:.9g} {e.b:.9g}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_index(path: Union[str, Path]) -> List[IndexEntry]:
    path = Path(path)
    if not path.is_file():
        raise ImageReadError(f"Sequence index not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        try:
            frame_id, timestamp, exposure = int(fields[0]), float(fields[1]), float(fields[2])
            a = float(fields[3]) if len(fields) > 3 else 0.0
            b = float(fields[4]) if len(fields) > 4 else 0.0
        except (IndexError, ValueError) as e:
            raise ImageReadError(f"Malformed index line {lineno} in {path}: {e}") from e
        entries.append(IndexEntry(frame_id, timestamp, exposure, a, b))
    return entries


def write_sequence(
    out_dir: Union[str, Path],
    scene: Scene,
    surfel_map: Optional[SurfelMap] = None,
    dither: bool = False,
    seed: int = 0,
    run_config: Optional[str] = None,
) -> List[IndexEntry]:
    """Render every pose of the scene into `out_dir` with index, ground truth, map and config."""
    spec = scene.spec
    out_dir = Path(out_dir)
    (out_dir / SEQUENCE_FRAMES_DIR).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for k, (pose, timestamp, (exposure, a, b)) in enumerate(zip(spec.poses, spec.timestamps, spec.exposures)):
        image, depth = render_image(scene, pose, spec.K, exposure, a, b, quantize=True, dither=dither, rng=rng)
        if not (depth > 0).any():
            raise SceneError(f"Frame #{k}: camera sees no geometry")
        write_pgm(frame_path(out_dir, k), image)
        entries.append(IndexEntry(k, timestamp, exposure, a, b))
    write_index(out_dir / SEQUENCE_INDEX_FILE, entries)
    write_tum(out_dir / GROUNDTRUTH_FILE, Trajectory(np.array(spec.timestamps), tuple(spec.poses)))
    if surfel_map is not None:
        save_map(surfel_map, out_dir / MAP_FILE)
    if run_config is not None:
        (out_dir / RUN_CONFIG_FILE).write_text(run_config)
    logger.info(f"Wrote {len(entries)} frames of '{spec.name}' to {out_dir}")
    return entries


def iter_frames(directory: Union[str, Path], entries: Optional[List[IndexEntry]] = None) -> Iterator[Tuple[IndexEntry, np.ndarray]]:
    """Yield (index entry, image) lazily; unreadable images raise ImageReadError with the frame index."""
    directory = Path(directory)
    if entries is None:
        entries = read_index(directory / SEQUENCE_INDEX_FILE)
    for entry in entries:
        yield entry, read_pgm(frame_path(directory, entry.frame_id), frame_index=entry.frame_id)
