"""Command-line entry point: ``ctrattn STAGE [--config FILE] [--out-dir DIR] [--seed N] [--force]``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .data import ConfigError, IngestError
from .metrics import CalibrationError
from .nets import NumericError
from .pipeline import STAGES, MissingArtifact, StageExists, load_config, run_stage

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctrattn", description=__doc__.split(":")[0])
    p.add_argument("stage", nargs="?", choices=STAGES, help="stage to run (defaults to the config's 'stage')")
    p.add_argument("--config", help="YAML/JSON config file or a stage manifest.json")
    p.add_argument("--out-dir", default="runs/default", help="run directory shared by all stages")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--force", action="store_true", help="overwrite an existing stage directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be non-negative")
            cfg = replace(cfg, seed=args.seed)
        stage = args.stage or cfg.stage
        if stage is None:
            raise ConfigError("no stage given on the command line or in the config")
        run_stage(args.out_dir, cfg, stage, force=args.force)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, CalibrationError, StageExists, IngestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
