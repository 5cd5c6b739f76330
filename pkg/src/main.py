"""Command-line entry point for count ESN forecasting runs."""
import argparse
import logging
import sys
from typing import List, Optional

from src.config import Config, load_config
from src.engine import STAGES, PipelineEngine
from src.errors import (
    ConfigError,
    CountESNError,
    DataError,
    NumericalError,
    StageArtifactError,
)

EXIT_OK = 0
EXIT_UNEXPECTED = CountESNError.exit_code
EXIT_CONFIG = ConfigError.exit_code
EXIT_DATA = DataError.exit_code
EXIT_NUMERICAL = NumericalError.exit_code
EXIT_MISSING_ARTIFACT = StageArtifactError.exit_code

STAGE_HELP = {
    "simulate": "Simulate a panel and its ground truth",
    "fit": "Fit every configured model on the training years",
    "forecast": "Rolling one-step-ahead forecasts over the target years",
    "score": "Score forecasts (MSPE, MSLPE, interval score, coverage)",
    "report": "Per-metric tables, residual diagnostics and optional plots",
}


def setup_logging(log_level: str, log_format: str):
    """Setup logging configuration."""
    level = getattr(logging, log_level.upper(), logging.INFO)

    if log_format == "logfmt":
        fmt = "time=%(asctime)s level=%(levelname)s logger=%(name)s msg=\"%(message)s\""
    else:
        fmt = "%(asctime)s | %(levelname)-8s | %(name)s | %(message)s"

    logging.basicConfig(
        level=level,
        format=fmt,
        datefmt="%Y-%m-%d %H:%M:%S",
        force=True
    )

    # Reduce noise from some libraries
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


def _comma_list(value: str) -> List[str]:
    names = [v.strip() for v in value.split(",") if v.strip()]
    if not names:
        raise argparse.ArgumentTypeError("expected a comma-separated list of model names")
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="countesn",
        description="Count echo state network forecasting - simulate, fit, forecast, score, report"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sub = subparsers.add_parser(stage, help=STAGE_HELP[stage])
        sub.add_argument("--config", "-c", required=True, help="Path to configuration YAML file")
        sub.add_argument("--seed", type=int, help="Master seed (overrides global.seed)")
        sub.add_argument("--out", help="Output directory (overrides global.output_dir)")
        sub.add_argument("--models", type=_comma_list,
                         help="Comma-separated subset of the configured models")
        sub.add_argument("--workers", type=int, help="Worker threads (overrides global.workers)")
    return parser


def apply_overrides(config: Config, args: argparse.Namespace) -> Config:
    """Fold CLI flags into the loaded config."""
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["output_dir"] = args.out
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError(f"--workers must be >= 1, got {args.workers}")
        updates["workers"] = args.workers
    if updates:
        config = config.model_copy(update={"global_": config.global_.model_copy(update=updates)})
    if args.models:
        config = config.select_models(args.models)
    return config


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, CountESNError):
        return error.exit_code
    return EXIT_UNEXPECTED


def main(argv: Optional[List[str]] = None) -> int:
    """Main function."""
    args = build_parser().parse_args(argv)

    # Load configuration
    try:
        config = apply_overrides(load_config(args.config), args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"Error loading configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG

    # Setup logging
    setup_logging(config.global_.log_level, config.global_.log_format)
    logger = logging.getLogger(__name__)

    logger.info(f"countesn {args.command}: config={args.config}, seed={config.global_.seed}, "
                f"models={[m.name for m in config.models]}, out={config.global_.output_dir}")

    try:
        PipelineEngine(config).run_stage(args.command)
    except CountESNError as e:
        logger.error(f"{args.command} failed: {e}")
        return exit_code_for(e)
    except Exception as e:
        logger.error(f"{args.command} failed unexpectedly: {e}", exc_info=True)
        return EXIT_UNEXPECTED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
