"""
RouteFuse command-line entry point.

    python main.py gen-data --out data
    python main.py train --data data --out runs/desk
    python main.py eval --data data --ckpt runs/desk/best.ckpt --out runs/desk/eval
    python main.py inspect --data data --ckpt runs/desk/best.ckpt --out runs/desk/eval
    python main.py gradcheck --seed 3
"""

import argparse
import sys
from typing import List, Optional

from cli import commands
from ingestion.dataset_io import DatasetFormatError
from modules.autodiff import GradientError, ShapeError
from modules.backbone import GateRangeError
from modules.checkpoint import CheckpointError
from modules.config import PRESETS, ConfigError, load_config
from modules.losses import NonFiniteLossError, WeatherLabelError
from modules.app_logger import setup_logger
from modules.voxel_grid import EmptyKeySetError, KernelSizeError

logger = setup_logger()

DOMAIN_ERRORS = (ConfigError, DatasetFormatError, CheckpointError, NonFiniteLossError, WeatherLabelError,
                 ShapeError, GradientError, GateRangeError, KernelSizeError, EmptyKeySetError, FileNotFoundError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="routefuse", description="Weather-routed LiDAR/radar fusion detector")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", help="config file (default: $ROUTEFUSE_CONFIG or preset only)")
        p.add_argument("--preset", choices=PRESETS, help="scale preset")
        p.add_argument("--seed", type=int, help="run seed")
        return p

    common(sub.add_parser("gen-data", help="generate the synthetic train/test splits")).add_argument(
        "--out", default="data")

    p = common(sub.add_parser("train", help="train a detector"))
    p.add_argument("--data", default="data", help="dataset folder or train split file")
    p.add_argument("--out", default=None, help="run folder (default: [run] output_dir)")

    for name, help_text in (("eval", "AP table and routing report"), ("inspect", "routing report only")):
        p = common(sub.add_parser(name, help=help_text))
        p.add_argument("--data", default="data", help="dataset folder or test split file")
        p.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
        p.add_argument("--out", default=None, help="report folder (default: [run] output_dir)")

    p = common(sub.add_parser("gradcheck", help="finite-difference check of every parameter group"))
    p.add_argument("--entries", type=int, default=3, help="entries probed per group")
    p.add_argument("--tolerance", type=float, default=1e-3)
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.preset, args.seed)
        out = getattr(args, "out", None) or config.run.output_dir
        if args.command == "gen-data":
            summary = commands.cmd_gen_data(config, out)
            return 1 if summary["errors"] and not any(summary["written"].values()) else 0
        if args.command == "train":
            commands.cmd_train(config, args.data, out)
        elif args.command == "eval":
            commands.cmd_eval(config, args.data, args.ckpt, out)
        elif args.command == "inspect":
            commands.cmd_inspect(config, args.data, args.ckpt, out)
        elif args.command == "gradcheck":
            report = commands.cmd_gradcheck(config, args.seed, args.entries, args.tolerance)
            return 0 if report.passed else 1
    except DOMAIN_ERRORS as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(run())
