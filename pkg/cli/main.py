"""surfloc command-line entry point."""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from cli.commands import cmd_build_map, cmd_degen_report, cmd_eval, cmd_localize, cmd_simulate
from common.errors import ConfigError, SurflocError
from config.constants import EXIT_OK, EXIT_USAGE
from config.settings import Settings, load_settings

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="surfloc",
        allow_abbrev=False,
        description="Direct sparse localization in prior surfel maps",
        epilog="Any run-config key can be overridden with --key value, e.g. --huber-gamma 12",
    )
    parser.add_argument("--config", type=Path, default=None, help="KEY=value run configuration file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-map", allow_abbrev=False, help="Build a surfel map from a point cloud PLY")
    p.add_argument("pointcloud", type=Path)
    p.add_argument("out", type=Path)

    p = sub.add_parser("simulate", allow_abbrev=False, help="Render a synthetic sequence with ground truth and map")
    p.add_argument("out_dir", type=Path)

    p = sub.add_parser("localize", allow_abbrev=False, help="Localize an image sequence in a surfel map")
    p.add_argument("sequence_dir", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--map", type=Path, default=None, help="Surfel map (default: <sequence_dir>/map.ply)")

    p = sub.add_parser("eval", allow_abbrev=False, help="ATE/RPE of an estimated trajectory")
    p.add_argument("estimate", type=Path)
    p.add_argument("groundtruth", type=Path)
    p.add_argument("out", type=Path, help="Metrics CSV")

    p = sub.add_parser("degen-report", allow_abbrev=False, help="Degeneracy report of a map along a trajectory")
    p.add_argument("map", type=Path)
    p.add_argument("trajectory", type=Path)
    p.add_argument("--out", type=Path, default=None)
    return parser


def parse_overrides(extra: List[str]) -> Dict[str, str]:
    """['--huber-gamma', '12'] -> {'HUBER_GAMMA': '12'}; keys are validated by Settings."""
    overrides: Dict[str, str] = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--"):
            raise ConfigError(f"Unexpected argument {token!r}")
        key, eq, value = token[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise ConfigError(f"Missing value for {token}")
            value = extra[i + 1]
            i += 1
        overrides[key.replace("-", "_").upper()] = value
        i += 1
    return overrides


def parse_args(argv: Optional[List[str]] = None) -> Tuple[argparse.Namespace, Settings]:
    args, extra = build_parser().parse_known_args(argv)
    return args, load_settings(args.config, parse_overrides(extra))


def run_command(args: argparse.Namespace, settings: Settings) -> None:
    if args.command == "build-map":
        cmd_build_map(args.pointcloud, args.out, settings)
    elif args.command == "simulate":
        cmd_simulate(args.out_dir, settings)
    elif args.command == "localize":
        cmd_localize(args.sequence_dir, args.out_dir, settings, args.map)
    elif args.command == "eval":
        cmd_eval(args.estimate, args.groundtruth, args.out, settings)
    elif args.command == "degen-report":
        cmd_degen_report(args.map, args.trajectory, settings, args.out)


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args, settings = parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    except SurflocError as e:
        logging.basicConfig(format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
        logger.error(f"Invalid arguments: {e}")
        return e.exit_code

    logging.basicConfig(
        level=getattr(logging, settings.LOG_LEVEL),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    logger.info(f"Running {args.command}")
    try:
        run_command(args, settings)
    except SurflocError as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return e.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
