"""Command line entry point.

One subcommand per pipeline stage plus `run-all` (the configured stage
list) and `config-dump` (every setting with its current value and a short
description).  Settings come from an optional JSON config file and are
overridden by `--run-dir`, `--input-dir`, and repeated `--set key=value`
flags, in that order.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .config import (STAGES, PipelineConfig, apply_override, describe,
                     load_config)
from .errors import ConfigError, DataError, NumericError
from .pipeline import run_pipeline

_EXIT_CODES = ((ConfigError, 2), (DataError, 3), (NumericError, 4))


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH",
                        help="JSON config file to start from")
    parser.add_argument("--run-dir", metavar="DIR",
                        help="directory all artifacts are written under")
    parser.add_argument("--input-dir", metavar="DIR",
                        help="read scan grid pairs from this directory "
                             "instead of generated phantoms")
    parser.add_argument("--set", metavar="KEY=VALUE", action="append",
                        default=[], dest="overrides",
                        help="override one setting by dotted path "
                             "(repeatable); see config-dump for keys")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="renodet",
        description="Kidney phantom generation, surface shape modelling, "
                    "and lesion scoring pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run only the {stage} stage")
        _add_common(p)
    p = sub.add_parser("run-all", help="run the configured stage list")
    _add_common(p)
    p = sub.add_parser("config-dump",
                       help="print every setting with value and description")
    _add_common(p)
    return parser


def _config_from_args(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.run_dir:
        cfg = dataclasses.replace(cfg, run_dir=args.run_dir)
    if args.input_dir:
        cfg = dataclasses.replace(cfg, input_dir=args.input_dir)
    for assignment in args.overrides:
        cfg = apply_override(cfg, assignment)
    return cfg


def _cmd_config_dump(cfg: PipelineConfig) -> None:
    for path, value, help_text in describe(cfg):
        line = f"{path} = {json.dumps(value)}"
        if help_text:
            line += f"  # {help_text}"
        print(line)


def _cmd_run(cfg: PipelineConfig) -> None:
    result = run_pipeline(cfg)
    for stage in result["stages"]:
        details = ", ".join(f"{k}={v}" for k, v in
                            sorted(result["report"][stage].items()))
        print(f"{stage}: {details}")
    print(f"artifacts: {len(result['artifacts'])} files under {cfg.run_dir}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "config-dump":
            _cmd_config_dump(cfg)
        elif args.command == "run-all":
            _cmd_run(cfg)
        else:
            cfg = dataclasses.replace(cfg, stages=(args.command,))
            _cmd_run(cfg)
    except tuple(e for e, _ in _EXIT_CODES) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    return 0


def _exit_code(exc: Exception) -> int:
    for klass, code in _EXIT_CODES:
        if isinstance(exc, klass):
            return code
    return 1


if __name__ == "__main__":
    sys.exit(main())
