from __future__ import annotations

import argparse
import sys
from collections.abc import Sequence
from pathlib import Path

from pydantic import ValidationError

from app.api import commands
from app.api.schemas import load_config
from app.core import config, logger
from app.core.errors import ConfigError, LabError, VerificationError
from app.service.sync import POLICY_KINDS

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUN = 2
EXIT_VERIFY = 3


def _float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _policy_list(text: str) -> list[str]:
    kinds = [part.strip() for part in text.split(",") if part.strip()]
    unknown = [k for k in kinds if k not in POLICY_KINDS]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown policies {unknown}; choose from {', '.join(POLICY_KINDS)}")
    return kinds


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="experiment config file")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--realtime", action="store_true", help="wall-clock runtime instead of simulation")
    common.add_argument("--format", choices=("csv", "json"), default=None, help="stdout table format")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")

    parser = argparse.ArgumentParser(prog=config.project_name, description=config.project_description)
    verbs = parser.add_subparsers(dest="verb", required=True)

    run = verbs.add_parser("run", parents=[common], help="run one experiment")
    run.add_argument("--export-task", type=Path, default=None, help="also write the task as JSON")

    compare = verbs.add_parser("compare", parents=[common], help="run several policies on one setup")
    compare.add_argument(
        "--policies", type=_policy_list, default=["bsp", "ssp", "fixed_adacomm", "adsp"]
    )

    sweep = verbs.add_parser("sweep", parents=[common], help="one run per parameter value")
    sweep.add_argument("--param", required=True, choices=commands.SWEEP_PARAMS)
    sweep.add_argument("--values", required=True, type=_float_list)

    verbs.add_parser("verify", parents=[common], help="check theory against simulation")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logger.setup(args.log_level, force=True)
    log = logger.get("cli")

    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
    except (ConfigError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    fmt = args.format or cfg.output.format

    try:
        match args.verb:
            case "run":
                if args.export_task is not None:
                    commands.write_task(cfg, args.export_task)
                summary = commands.cmd_run(cfg, realtime=args.realtime)
                print(summary.line())
            case "compare":
                rows = commands.cmd_compare(cfg, args.policies, realtime=args.realtime)
                print(commands.render(rows, fmt), end="" if fmt == "csv" else "\n")
            case "sweep":
                rows = commands.cmd_sweep(cfg, args.param, args.values, realtime=args.realtime)
                print(commands.render(rows, fmt), end="" if fmt == "csv" else "\n")
            case "verify":
                report = commands.cmd_verify(cfg)
                print(commands.render(report.checks, fmt), end="" if fmt == "csv" else "\n")
                if not report.passed:
                    raise VerificationError(report.failed)
    except (ConfigError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationError as exc:
        print(f"verification failed: {', '.join(exc.failed)}", file=sys.stderr)
        return EXIT_VERIFY
    except LabError as exc:
        log.debug("run failure", exc_info=True)
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
