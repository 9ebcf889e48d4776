"""Batch commands: build a map, simulate a sequence, localize, evaluate and report degeneracy."""
import logging
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from common.errors import ConfigError
from config.constants import GROUNDTRUTH_FILE, MAP_FILE, RUN_CONFIG_FILE
from config.settings import RenderConfig, Settings, load_settings
from evaluation.metrics import MetricRow, compute_metrics, write_metrics
from evaluation.trajectory import read_tum
from localization.degeneracy import DegeneracyReport, constraints_from_trajectory, report_constraints
from localization.pipeline import TRAJECTORY_FILE, LocalizationResult, Localizer
from mapping.ply import read_point_cloud
from mapping.surfel_map import SurfelMap, build_surfel_map, load_map, save_map
from synth.presets import build_preset
from synth.sequence_io import IndexEntry, write_sequence
from synth.world import make_scene, perturb_map, perturb_pose, sample_surfel_map

logger = logging.getLogger(__name__)


def pose_text(values) -> str:
    return " ".join(f"{v:.9f}" for v in values)


def cmd_build_map(pointcloud: Path, out: Path, settings: Settings) -> SurfelMap:
    """Voxel-downsample a point cloud into a surfel map PLY."""
    points = read_point_cloud(pointcloud)
    surfel_map = build_surfel_map(points, settings.VOXEL_SIZE, settings.NORMAL_NEIGHBORS)
    save_map(surfel_map, out)
    print(f"surfels={len(surfel_map)} radius={surfel_map.radii[0]:.6f}")
    return surfel_map


def cmd_simulate(out_dir: Path, settings: Settings) -> List[IndexEntry]:
    """Render a preset sequence with ground truth, surfel map and the run config localize needs."""
    spec = build_preset(
        settings.PRESET,
        settings.camera,
        settings.NUM_FRAMES,
        settings.FRAME_RATE,
        settings.SEED,
        settings.EXPOSURE_VARIATION,
    )
    scene = make_scene(spec)
    surfel_map = sample_surfel_map(scene, settings.VOXEL_SIZE)
    if settings.MAP_NOISE_SIGMA > 0:
        surfel_map = perturb_map(surfel_map, settings.MAP_NOISE_SIGMA, settings.SEED, settings.NORMAL_NEIGHBORS)

    initial_pose = spec.poses[0]
    if settings.INITIAL_PERTURBATION_T > 0 or settings.INITIAL_PERTURBATION_R_DEG > 0:
        initial_pose = perturb_pose(
            initial_pose, settings.INITIAL_PERTURBATION_T, settings.INITIAL_PERTURBATION_R_DEG, settings.SEED
        )
    run_settings = settings.model_copy(update={"INITIAL_POSE": pose_text(initial_pose.to_tum())})
    entries = write_sequence(
        out_dir, scene, surfel_map, dither=settings.DITHER, seed=settings.SEED, run_config=run_settings.to_env_text()
    )
    print(f"frames={len(entries)} surfels={len(surfel_map)} preset={spec.name}")
    return entries


def cmd_localize(sequence_dir: Path, out_dir: Path, settings: Settings, map_path: Optional[Path] = None) -> LocalizationResult:
    """Localize a sequence against a surfel map starting from INITIAL_POSE."""
    initial_pose = settings.initial_pose
    if initial_pose is None:
        raise ConfigError("INITIAL_POSE is required for localize")
    surfel_map = load_map(map_path or Path(sequence_dir) / MAP_FILE)
    localizer = Localizer(surfel_map, settings)
    result = localizer.run(sequence_dir, initial_pose)
    localizer.write_outputs(out_dir)
    print(f"frames={len(result.trajectory)} keyframes={result.num_keyframes}")
    return result


def cmd_eval(est_path: Path, gt_path: Path, out: Path, settings: Settings) -> List[MetricRow]:
    """ATE, scale error and RPE per segment length as a metrics CSV."""
    est = read_tum(est_path)
    gt = read_tum(gt_path)
    rows = compute_metrics(est, gt, settings.rpe_segments, with_scale=True, max_dt=settings.ASSOCIATION_MAX_DT)
    write_metrics(out, rows)
    for name, value, count in rows:
        print(f"{name}={value:.6g} count={count}")
    return rows


def cmd_degen_report(map_path: Path, trajectory_path: Path, settings: Settings, out: Optional[Path] = None) -> DegeneracyReport:
    """Degeneracy of the surfel constraints observable along a trajectory."""
    surfel_map = load_map(map_path)
    trajectory = read_tum(trajectory_path)
    constraints = constraints_from_trajectory(
        surfel_map,
        trajectory.poses,
        settings.camera,
        RenderConfig.from_settings(settings),
        window_size=settings.WINDOW_SIZE,
    )
    result = report_constraints(
        constraints,
        coplanar_epsilon=settings.COPLANAR_EPSILON,
        angle_tolerance_deg=settings.PLANE_ANGLE_TOLERANCE_DEG,
        offset_tolerance=settings.PLANE_OFFSET_TOLERANCE,
        nullspace_tolerance=settings.NULLSPACE_TOLERANCE,
    )
    text = result.to_text()
    if out is not None:
        Path(out).write_text(text)
    print(text, end="")
    return result


def run_experiment(settings: Settings, work_dir: Path) -> Dict[str, float]:
    """simulate -> localize -> eval in `work_dir`; metric name -> value plus the mean constraint ratio."""
    work_dir = Path(work_dir)
    sequence_dir = work_dir / "sequence"
    cmd_simulate(sequence_dir, settings)
    run_settings = load_settings(sequence_dir / RUN_CONFIG_FILE)
    result = cmd_localize(sequence_dir, work_dir / "output", run_settings)
    rows = cmd_eval(
        work_dir / "output" / TRAJECTORY_FILE, sequence_dir / GROUNDTRUTH_FILE, work_dir / "metrics.csv", run_settings
    )
    metrics = {name: value for name, value, _ in rows}
    ratios = [row[4] for row in result.constraint_rows]
    metrics["constraint_ratio"] = float(np.mean(ratios)) if ratios else 0.0
    metrics["eig_ratio_31"] = float(np.mean([row[6] for row in result.constraint_rows])) if ratios else 0.0
    metrics["diameter"] = read_tum(sequence_dir / GROUNDTRUTH_FILE).diameter()
    return metrics
