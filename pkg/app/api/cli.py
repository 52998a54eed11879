import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import yaml

from app.config import config
from app.models.results import ResultBundle
from app.services.experiment_service import (
    ExperimentService,
    apply_overrides,
    load_config_data,
    validate_config,
)
from app.services.result_writer import ResultWriter
from app.utils.errors import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, ConfigValidationError, QuantumThermoError

logger = logging.getLogger(__name__)


def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be a non-negative integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quantum-ft",
        description="Trajectory entropy production and fluctuation theorems for open quantum systems.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment described by a JSON config")
    run.add_argument("--config", required=True, help="path to the JSON experiment config")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=_non_negative, help="override run.seed")
    run.add_argument("--trajectories", type=_non_negative, help="override run.trajectories")
    run.add_argument(
        "--format",
        choices=config.SUMMARY_FORMATS,
        default=None,
        help="stdout summary format (default from QFT_SUMMARY_FORMAT)",
    )
    return parser


def summary_data(bundle: ResultBundle, written: List[Path]) -> dict:
    data = {
        "model": bundle.model,
        "mode": bundle.mode,
        "config_hash": bundle.provenance.config_hash,
        "seed": bundle.provenance.seed,
        "wall_clock_seconds": round(bundle.wall_clock_seconds, 3),
        "files": [p.name for p in written],
    }
    if bundle.ft_report is not None:
        for which in ("total", "adiabatic", "nonadiabatic"):
            ft = getattr(bundle.ft_report, f"integral_{which}")
            data[f"integral_{which}"] = ft.value if ft.available else None
        data["detailed_max_residual"] = bundle.ft_report.detailed_max_residual
    return data


def format_summary(data: dict, output_format: str = "table") -> str:
    """Render the run summary the same way for every model."""
    if output_format == "json":
        return json.dumps(data, indent=2)
    elif output_format == "yaml":
        return yaml.safe_dump(data, default_flow_style=False, sort_keys=False)
    lines = ["KEY\tVALUE"]
    for key, value in data.items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}\t{'-' if value is None else value}")
    return "\n".join(lines) + "\n"


def run_command(args: argparse.Namespace) -> int:
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"cli: cannot read config {args.config}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    try:
        data = load_config_data(text)
        data, overrides = apply_overrides(data, args.seed, args.trajectories)
        cfg = validate_config(data)
        bundle = ExperimentService(config.WORKERS).run(cfg, overrides)
        written = ResultWriter(args.out).emit(bundle)
    except ConfigValidationError as exc:
        for violation in exc.violations:
            print(f"cli: {violation}", file=sys.stderr)
        return EXIT_VALIDATION
    except QuantumThermoError as exc:
        logger.error("run failed: %s", exc)
        print(str(exc), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"cli: cannot write results to {args.out}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    output_format = args.format or config.SUMMARY_FORMAT
    if output_format not in config.SUMMARY_FORMATS:
        logger.warning("unknown summary format %r, using table", output_format)
        output_format = "table"
    sys.stdout.write(format_summary(summary_data(bundle, written), output_format))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=getattr(logging, config.LOG_LEVEL, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; those are validation failures here
        return EXIT_OK if not exc.code else EXIT_VALIDATION
    if args.command == "run":
        return run_command(args)
    return EXIT_VALIDATION
