"""
sinomap command line.

Subcommands: simulate, train, enhance, evaluate, report, run (all five in order), tune.

Exit codes:
    0  success
    1  usage error
    2  validation or format error (bad config, bad file, manifest conflict)
    3  runtime failure (missing inputs, anything unexpected)
    4  finished with warnings (report with missing methods)

Usage:
    sinomap run --config configs/smoke.ini
    sinomap enhance --config configs/smoke.ini --checkpoint out/train/10mAs/semi.netp --input scan.sino
"""

import argparse
import logging
import sys
from typing import List, Optional

import pydantic
from dotenv import load_dotenv

from sinomap.config import ExperimentConfig, parse_config
from sinomap.errors import FormatError, ValidationError

logger = logging.getLogger("sinomap")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
EXIT_WARNING = 4

COMMANDS = ("simulate", "train", "enhance", "evaluate", "report", "run", "tune")


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="sinomap", description="MAP-guided low-dose CT sinogram enhancement")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name, help=f"{name} stage" if name != "run" else "all stages in order")
        cmd.add_argument("--config", required=True, help="Experiment config (.ini)")
        cmd.add_argument("--out", default=None, help="Output directory (overrides [experiment] out_dir)")
        cmd.add_argument("--seed", type=int, default=None, help="Master seed (overrides [experiment] seed)")
        cmd.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
        if name in ("simulate", "enhance", "run"):
            cmd.add_argument("--dump", action="store_true", help="Write human-readable .txt previews next to sinograms")
        if name == "enhance":
            cmd.add_argument("--checkpoint", default=None, help="Network checkpoint (.netp) for custom inputs")
            cmd.add_argument("--input", default=None, help="A .sino file or a directory of them")
    return parser


def configure_logging(quiet: bool = False):
    logging.basicConfig(
        level=logging.WARNING if quiet else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )


def run_command(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    from pipeline import enhance, evaluate, report, simulate, train, tune

    dump = getattr(args, "dump", False)
    if args.command == "simulate":
        simulate.main(cfg, dump=dump)
    elif args.command == "train":
        train.main(cfg)
    elif args.command == "enhance":
        if args.checkpoint or args.input:
            if not (args.checkpoint and args.input):
                raise ValidationError("--checkpoint and --input go together")
            enhance.enhance_custom(cfg, args.checkpoint, args.input, dump=dump)
        else:
            enhance.main(cfg, dump=dump)
    elif args.command == "evaluate":
        evaluate.main(cfg)
    elif args.command == "report":
        return EXIT_OK if report.main(cfg)["complete"] else EXIT_WARNING
    elif args.command == "tune":
        tune.main(cfg)
    elif args.command == "run":
        simulate.main(cfg, dump=dump)
        train.main(cfg)
        enhance.main(cfg, dump=dump)
        evaluate.main(cfg)
        return EXIT_OK if report.main(cfg)["complete"] else EXIT_WARNING
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    load_dotenv()
    configure_logging(args.quiet)
    try:
        cfg = parse_config(args.config).with_seed(args.seed).with_out_dir(args.out)
        return run_command(args, cfg)
    except (ValidationError, FormatError, pydantic.ValidationError) as e:
        logger.error("[%s] ✗ %s", args.command, e)
        return EXIT_VALIDATION
    except Exception as e:
        logger.error("[%s] ✗ ERROR: %s", args.command, e)
        logger.debug("Traceback", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
