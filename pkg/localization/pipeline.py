"""Sequence-level localization run with diagnostics output."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

from common.errors import ImageReadError
from common.geometry import Pose
from config.constants import CONSTRAINT_CSV_HEADER, OPTIMIZER_CSV_HEADER, SEQUENCE_INDEX_FILE
from config.settings import OptimizerConfig, RenderConfig, Settings, TrackerConfig
from evaluation.metrics import write_csv
from evaluation.trajectory import Trajectory, write_tum
from localization.degeneracy import report
from localization.frontend import Frontend, KeyframeUpdate
from mapping.surfel_map import SurfelMap
from synth.sequence_io import IndexEntry, iter_frames, read_index

logger = logging.getLogger(__name__)

TRAJECTORY_FILE = "trajectory.txt"
OPTIMIZER_LOG_FILE = "optimizer.csv"
CONSTRAINT_LOG_FILE = "constraints.csv"
DEGENERACY_DIR = "degeneracy"


@dataclass
class LocalizationResult:
    trajectory: Trajectory
    optimizer_rows: List[list] = field(default_factory=list)
    constraint_rows: List[list] = field(default_factory=list)
    num_keyframes: int = 0


class Localizer:
    """Runs the front end over an image sequence and collects per-keyframe diagnostics."""

    def __init__(self, surfel_map: SurfelMap, settings: Settings):
        self.settings = settings
        self.frontend = Frontend(
            surfel_map,
            settings.camera,
            TrackerConfig.from_settings(settings),
            OptimizerConfig.from_settings(settings),
            RenderConfig.from_settings(settings),
        )
        self.result: Optional[LocalizationResult] = None
        self.reports: List[Tuple[int, str]] = []

    def _record_keyframe(self, update: KeyframeUpdate, result: LocalizationResult) -> None:
        for rec in update.solve.records:
            result.optimizer_rows.append(
                [update.keyframe_id, rec.iteration, rec.energy_surfel, rec.energy_non, rec.damping, rec.step_norm]
            )
        s = self.settings
        degeneracy = report(
            self.frontend.window,
            coplanar_epsilon=s.COPLANAR_EPSILON,
            angle_tolerance_deg=s.PLANE_ANGLE_TOLERANCE_DEG,
            offset_tolerance=s.PLANE_OFFSET_TOLERANCE,
            nullspace_tolerance=s.NULLSPACE_TOLERANCE,
        )
        self.reports.append((update.keyframe_id, degeneracy.to_text()))
        result.constraint_rows.append(
            [
                update.keyframe_id,
                update.keyframe_id,
                update.surfel_constraints,
                update.total_constraints,
                update.constraint_ratio,
                degeneracy.eig_ratio_21,
                degeneracy.eig_ratio_31,
            ]
        )
        result.num_keyframes += 1
        logger.info(
            f"Keyframe #{update.keyframe_id}: {degeneracy.classification.value}, "
            f"constraint ratio {update.constraint_ratio:.2f}"
        )

    def run(self, sequence_dir: Union[str, Path], initial_pose: Pose, entries: Optional[List[IndexEntry]] = None) -> LocalizationResult:
        """Localize every frame of the sequence; errors propagate with the frame index."""
        if entries is None:
            entries = read_index(Path(sequence_dir) / SEQUENCE_INDEX_FILE)
        if not entries:
            raise ImageReadError(f"Sequence {sequence_dir} has no frames")
        result = LocalizationResult(trajectory=Trajectory.from_pairs([]))
        frames = iter_frames(sequence_dir, entries)
        first, image = next(frames)
        self.frontend.start(image, initial_pose, first.frame_id, first.timestamp, first.exposure)
        result.num_keyframes = 1
        for entry, image in frames:
            _, update = self.frontend.process(image, entry.frame_id, entry.timestamp, entry.exposure)
            if update is not None:
                self._record_keyframe(update, result)
        result.trajectory = Trajectory.from_pairs(self.frontend.trajectory())
        self.result = result
        logger.info(f"Localized {len(result.trajectory)} frames with {result.num_keyframes} keyframes")
        return result

    def write_outputs(self, out_dir: Union[str, Path]) -> None:
        """Trajectory (TUM), optimizer and constraint CSV logs and one degeneracy report per keyframe."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_tum(out_dir / TRAJECTORY_FILE, self.result.trajectory)
        write_csv(out_dir / OPTIMIZER_LOG_FILE, ["keyframe_id"] + OPTIMIZER_CSV_HEADER, self.result.optimizer_rows)
        write_csv(out_dir / CONSTRAINT_LOG_FILE, CONSTRAINT_CSV_HEADER, self.result.constraint_rows)
        report_dir = out_dir / DEGENERACY_DIR
        report_dir.mkdir(exist_ok=True)
        for kf_id, text in self.reports:
            (report_dir / f"keyframe_{kf_id:06d}.txt").write_text(text)
