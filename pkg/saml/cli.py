# Copyright (c) 2026, saml-pipeline contributors.

"""Command line entry point: ``saml <command> [options]``."""

import argparse
import json
import logging
import os
import sys
import typing

from . import __version__, harness
from .config import DEFAULT_CONFIG_FILE, Config
from .errors import (
    ArtifactMissingError,
    BackendError,
    ContractViolationError,
    InputError,
    SegmenterUnavailableError,
)
from .metrics import format_report_table

logger = logging.getLogger(__name__)

_ERRORS = (
    InputError,
    SegmenterUnavailableError,
    BackendError,
    ArtifactMissingError,
    ContractViolationError,
)


def _parse_settings(items: typing.Sequence[str]) -> dict[str, str]:
    settings = {}
    for item in items:
        option, sep, value = item.partition("=")
        if not sep or not option:
            raise InputError(f"--set expects section.option=value, got '{item}'")
        settings[option.strip()] = value.strip()
    return settings


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        metavar="PATH",
        help=f"TOML configuration file (default: ./{DEFAULT_CONFIG_FILE} if present)",
    )
    common.add_argument("--seed", type=int, help="global seed for every stage")
    common.add_argument("--jobs", type=int, help="per-patch worker threads")
    common.add_argument(
        "--resume",
        action="store_true",
        help="skip work whose artifacts already exist",
    )
    common.add_argument(
        "--set",
        dest="settings",
        action="append",
        default=[],
        metavar="SECTION.OPTION=VALUE",
        help="override one configuration option (repeatable)",
    )
    common.add_argument(
        "--log-level",
        default="INFO",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
    )

    parser = argparse.ArgumentParser(
        prog="saml", description="Box-prompted pseudo-labels and corrective training."
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("synth", parents=[common], help="write a synthetic corpus")
    commands.add_parser("boxes", parents=[common], help="generate box prompts")
    commands.add_parser(
        "pseudolabel", parents=[common], help="segment box prompts into label maps"
    )
    commands.add_parser("train", parents=[common], help="train the segmentation model")
    commands.add_parser(
        "evaluate", parents=[common], help="score the test split of a checkpoint"
    )
    report = commands.add_parser(
        "report", parents=[common], help="print (and merge) report tables"
    )
    report.add_argument("reports", nargs="*", metavar="REPORT_CSV")
    commands.add_parser(
        "matrix", parents=[common], help="run every method and consolidate the report"
    )
    return parser


def _load_config(args: argparse.Namespace) -> Config:
    settings = _parse_settings(args.settings)
    if args.seed is not None:
        settings["seed"] = str(args.seed)
    if args.jobs is not None:
        settings["jobs"] = str(args.jobs)
    path = args.config
    if path is None and os.path.isfile(DEFAULT_CONFIG_FILE):
        path = DEFAULT_CONFIG_FILE
    return Config(path, settings)


def _run(args: argparse.Namespace) -> None:
    config = _load_config(args)
    logger.debug("saml %s %s", __version__, args.command)
    if args.command == "synth":
        harness.run_synth(config)
    elif args.command == "boxes":
        harness.run_boxes(config)
    elif args.command == "pseudolabel":
        harness.run_pseudolabel(config, resume=args.resume)
    elif args.command == "train":
        harness.run_train(config, resume=args.resume)
    elif args.command == "evaluate":
        print(format_report_table(harness.run_evaluate(config)), end="")
    elif args.command == "report":
        print(harness.run_report(config, args.reports), end="")
    elif args.command == "matrix":
        report = harness.run_experiment_matrix(config, resume=args.resume)
        print(format_report_table(report), end="")


def _report_error(error: BaseException, exit_code: int) -> int:
    print(
        json.dumps(
            {
                "error": type(error).__name__,
                "message": str(error),
                "exit_code": exit_code,
            }
        ),
        file=sys.stderr,
    )
    return exit_code


def main(argv: typing.Union[typing.Sequence[str], None] = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level, format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )
    logging.captureWarnings(True)
    try:
        _run(args)
    except _ERRORS as e:
        return _report_error(e, e.exit_code)
    except AttributeError as e:
        # Missing required options surface from Config as AttributeError.
        if "Config is missing required attribute" not in str(e):
            raise
        return _report_error(e, InputError.exit_code)
    except ValueError as e:
        return _report_error(e, InputError.exit_code)
    return 0
