"""Metric rows and CSV output."""
import csv
import logging
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

from common.errors import MetricError
from config.constants import METRICS_CSV_HEADER
from evaluation.trajectory import Trajectory, align, apply_alignment, associate, ate_rmse, rpe_errors

logger = logging.getLogger(__name__)

MetricRow = Tuple[str, float, int]


def segment_label(length: float) -> str:
    return f"rpe_{length:g}m"


def compute_metrics(
    est: Trajectory,
    gt: Trajectory,
    segments: Sequence[float] = (1.0, 2.0, 4.0),
    with_scale: bool = True,
    max_dt: float = 0.01,
) -> List[MetricRow]:
    """ATE after similarity alignment, scale error and one RPE row per segment length.

    Segment lengths longer than the ground-truth path are skipped with a warning.
    """
    scale, transform = align(est, gt, with_scale, max_dt)
    aligned = apply_alignment(est, scale, transform)
    n_pairs = len(associate(aligned, gt, max_dt)[0])
    rows: List[MetricRow] = [
        ("ate_rmse", ate_rmse(aligned, gt, max_dt), n_pairs),
        ("scale_error", abs(scale - 1.0), n_pairs),
    ]
    for length in segments:
        try:
            errors = rpe_errors(aligned, gt, length, max_dt)
        except MetricError as e:
            logger.warning(f"Skipping {segment_label(length)}: {e}")
            continue
        rows.append((segment_label(length), float((errors**2).mean() ** 0.5), len(errors)))
    return rows


def write_csv(path: Union[str, Path], header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in row])


def write_metrics(path: Union[str, Path], rows: Iterable[MetricRow]) -> None:
    write_csv(path, METRICS_CSV_HEADER, rows)


def read_metrics(path: Union[str, Path]) -> List[MetricRow]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != METRICS_CSV_HEADER:
            raise MetricError(f"Unexpected metrics header {header}")
        return [(name, float(value), int(count)) for name, value, count in reader]
