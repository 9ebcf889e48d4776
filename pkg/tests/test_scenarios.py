"""End-to-end localization runs over synthetic scenes and the sweep scripts."""
import math

import numpy as np
import pytest

from cli.commands import run_experiment
from config.constants import ScenePreset
from config.settings import load_settings
from scripts import sweep_degeneracy, sweep_map_noise

ACCURACY = 0.01


def accurate(metrics):
    """ATE below 1% of the trajectory diameter and scale within 1%."""
    return metrics["ate_rmse"] < ACCURACY * metrics["diameter"] and metrics["scale_error"] < ACCURACY


def test_noise_sweep_csv_format(tmp_path, monkeypatch):
    """The map-noise sweep writes its rows with the metrics CSV formatting."""
    monkeypatch.setattr(sweep_map_noise, "sweep", lambda config, scale: [[0.0, 1.0 / 3.0, math.nan, 0.5, "ok"]])
    out = tmp_path / "noise.csv"
    sweep_map_noise.main(["--out", str(out)])
    assert out.read_text().splitlines() == [
        ",".join(sweep_map_noise.HEADER),
        "0,0.333333333,nan,0.5,ok",
    ]


def test_degeneracy_sweep_csv_format(tmp_path, monkeypatch):
    """The degeneracy sweep writes its rows with the metrics CSV formatting."""
    rows = [["single-wall", 0.2, 2.0 / 30.0, 0.1, 0.0, "ok"]]
    monkeypatch.setattr(sweep_degeneracy, "sweep", lambda config: rows)
    out = tmp_path / "degeneracy.csv"
    sweep_degeneracy.main(["--out", str(out)])
    assert out.read_text().splitlines() == [
        ",".join(sweep_degeneracy.HEADER),
        "single-wall,0.2,0.0666666667,0.1,0,ok",
    ]


@pytest.mark.slow
def test_orbit_localization_accuracy(tmp_path):
    """A 200-frame orbit in an exact box-room map is localized to 1% of its diameter with metric scale."""
    settings = load_settings(None, {"PRESET": ScenePreset.ORBIT.value, "NUM_FRAMES": "200"})
    metrics = run_experiment(settings, tmp_path)
    assert metrics["ate_rmse"] < ACCURACY * metrics["diameter"]
    assert metrics["scale_error"] < ACCURACY


@pytest.mark.slow
def test_perturbed_initial_pose_converges(tmp_path):
    """At least 9 of 10 box-room runs started 0.3 m and 5 degrees off converge."""
    converged = 0
    for seed in range(10):
        settings = load_settings(
            None,
            {
                "PRESET": ScenePreset.BOX_ROOM.value,
                "INITIAL_PERTURBATION_T": "0.3",
                "INITIAL_PERTURBATION_R_DEG": "5",
                "SEED": str(seed),
            },
        )
        metrics = run_experiment(settings, tmp_path / f"seed{seed}")
        converged += accurate(metrics)
    assert converged >= 9


@pytest.mark.slow
def test_map_noise_error_trend():
    """Box-room ATE does not decrease as map noise grows."""
    rows = sweep_map_noise.sweep()
    assert [row[-1] for row in rows] == ["ok"] * len(sweep_map_noise.NOISE_FACTORS)
    ates = [row[1] for row in rows]
    assert all(a <= b for a, b in zip(ates, ates[1:]))


@pytest.mark.slow
def test_degenerate_scenes_have_larger_errors():
    """Single-wall and corridor errors are at least twice the box-room error."""
    rows = {row[0]: row for row in sweep_degeneracy.sweep()}
    assert all(row[-1] == "ok" for row in rows.values())
    box = rows[ScenePreset.BOX_ROOM.value][1]
    for preset in (ScenePreset.CORRIDOR, ScenePreset.SINGLE_WALL):
        assert rows[preset.value][1] >= 2.0 * box
    sparse = [row[1] for row in rows.values() if row[3] <= sweep_degeneracy.LOW_CONSTRAINT_RATIO]
    if sparse:
        assert np.mean(sparse) > box
