"""The `pfedbayes` command line: `run`, `validate-config` and `gen-data`."""

from __future__ import annotations

import argparse
import sys
from collections.abc import Sequence

from loguru import logger

from pfedbayes import path_consts
from pfedbayes.experiment import ConfigError, ExperimentConfig, parse_config, run_experiment, save_dataset

LOG_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level} | {message}"

FLAG_TO_KEY: dict[str, str] = {
    "--algorithm": "algorithm",
    "--dataset": "dataset",
    "--tier": "tier",
    "--zeta": "zeta",
    "--rounds": "rounds",
    "--local-steps": "local_steps",
    "--subset-size": "subset_size",
    "--beta": "beta",
    "--eta1": "eta1",
    "--eta2": "eta2",
    "--batch-size": "batch_size",
    "--mc-draws": "mc_draws",
    "--rho-init": "rho_init",
    "--seed": "seed",
    "--workers": "workers",
    "--out": "output_dir",
}
"""Every flag that overrides a config key, and the key it overrides."""


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=str, default=None, help="A flat key=value config file")
    for flag, key in FLAG_TO_KEY.items():
        shared.add_argument(flag, dest=key, type=str, default=None, help=f"Overrides `{key}` from the config file")
    shared.add_argument("--log-level", type=str, default="INFO", help="The lowest log level written to stderr")

    parser = argparse.ArgumentParser(
        prog=path_consts.PACKAGE_NAME,
        description="Personalized federated learning of Bayesian neural networks",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    subparsers.add_parser("run", parents=[shared], help="Train and write rounds.csv, summary.csv and the final state")
    subparsers.add_parser("validate-config", parents=[shared], help="Print the resolved configuration as JSON")
    subparsers.add_parser("gen-data", parents=[shared], help="Write the configured dataset as an .npz file")
    return parser


def configure_logging(level: str, cfg: ExperimentConfig | None = None) -> None:
    """Log to stderr and, for runs, to a log file in the output folder."""
    logger.remove()
    handlers: list[dict] = [{"sink": sys.stderr, "format": LOG_FORMAT, "level": level.upper()}]
    if cfg is not None:
        log_path = path_consts.get_run_output_paths(cfg.output_dir)["log"]
        log_path.parent.mkdir(parents=True, exist_ok=True)
        handlers.append({"sink": log_path, "format": LOG_FORMAT, "level": "DEBUG", "mode": "w"})
    logger.configure(handlers=handlers)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    overrides = {key: getattr(args, key) for key in FLAG_TO_KEY.values()}

    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return 2
    except OSError as e:
        logger.error(f"Could not read the config file: {e}")
        return 1

    if args.command == "validate-config":
        print(cfg.model_dump_json(indent=4))
        return 0

    if args.command == "gen-data":
        try:
            save_dataset(cfg)
        except (OSError, ValueError) as e:
            logger.error(f"Could not generate the dataset: {e}")
            return 1
        return 0

    try:
        configure_logging(args.log_level, cfg)
    except OSError as e:
        logger.error(f"Could not create the output folder: {e}")
        return 1
    return run_experiment(cfg)


if __name__ == "__main__":
    sys.exit(main())
