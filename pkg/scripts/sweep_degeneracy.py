"""Translation error against surfel-constraint degeneracy across scene presets."""
import argparse
import logging
import math
import os
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from cli.commands import run_experiment
from common.errors import SurflocError
from config.constants import ScenePreset
from config.settings import load_settings
from evaluation.metrics import write_csv

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

PRESETS = (ScenePreset.BOX_ROOM, ScenePreset.CORRIDOR, ScenePreset.SINGLE_WALL)
HEADER = ["preset", "ate_rmse", "relative_ate", "constraint_ratio", "eig_ratio_31", "status"]
LOW_CONSTRAINT_RATIO = 0.2


def sweep(config: Path = None, presets=PRESETS) -> list:
    base = load_settings(config)
    rows = []
    for preset in presets:
        settings = base.model_copy(update={"PRESET": preset})
        logger.info(f"Preset {preset.value}")
        with tempfile.TemporaryDirectory() as work_dir:
            try:
                metrics = run_experiment(settings, Path(work_dir))
                status = "ok"
            except SurflocError as e:
                logger.error(f"Preset {preset.value}: run failed: {e}", exc_info=True)
                metrics, status = {}, type(e).__name__
        ate = metrics.get("ate_rmse", math.nan)
        diameter = metrics.get("diameter", math.nan)
        rows.append([
            preset.value,
            ate,
            ate / diameter if diameter else math.nan,
            metrics.get("constraint_ratio", math.nan),
            metrics.get("eig_ratio_31", math.nan),
            status,
        ])
    return rows


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", type=Path, default=None)
    parser.add_argument("--out", type=Path, default=Path("degeneracy.csv"))
    args = parser.parse_args(argv)

    rows = sweep(args.config)
    write_csv(args.out, HEADER, rows)
    for preset, ate, _, ratio, _, status in rows:
        flag = " (few surfel constraints)" if ratio <= LOW_CONSTRAINT_RATIO else ""
        logger.info(f"{preset}: ATE {ate:.4f} m, constraint ratio {ratio:.2f}{flag}, {status}")


if __name__ == "__main__":
    main()
