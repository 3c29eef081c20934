"""Command line entry point.

    diffcurriculum <command> --config PATH [--out DIR] [--seed N] [--workers N] [--resume]

Commands: gen-data, train-diffusion, gen-spectrum, train, evaluate, ablate,
report, run. Exit codes: 0 success, 2 config error, 3 stage failure.

The output directory is taken from --out, else from the DIFFCURRICULUM_OUT
environment variable, else from the config's ``out_dir``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import OUT_ENV, ConfigError, parse_config
from .pipeline import STAGE_LOG_FIELDS, StageFailure, run_pipeline
from .report import ReportError, emit_report

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

# Stages owned by each subcommand; earlier stages must already exist.
COMMAND_STAGES = {
    "gen-data": ("gen-data",),
    "train-diffusion": ("train-diffusion",),
    "gen-spectrum": ("pretrain-classifier", "identify-hard", "gen-spectrum", "filter"),
    "train": ("curriculum-train",),
    "evaluate": ("evaluate",),
}
COMMANDS = (*COMMAND_STAGES, "ablate", "report", "run")

__all__ = ["main", "build_parser", "STAGE_LOG_FIELDS"]

log = logging.getLogger("diffcurriculum")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffcurriculum", description="Diffusion curriculum experiments on glyph data.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="flat YAML experiment config")
    p.add_argument("--out", help=f"run directory (overrides ${OUT_ENV} and out_dir)")
    p.add_argument("--seed", type=int, help="global seed, overrides the config")
    p.add_argument("--workers", type=int, help="worker processes for generation and the battery")
    p.add_argument("--resume", action="store_true", help="reuse stages whose artifacts are still valid")
    p.add_argument("--arms", help="comma separated battery arms (ablate only)")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(args.config)
        changes = {}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.workers is not None:
            changes["workers"] = args.workers
        if args.out is not None:
            changes["out_dir"] = args.out
        cfg = cfg.replace(**changes)
    except ConfigError as exc:
        print(f"config error ({exc.kind}): {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run_dir = Path(args.out) if args.out else cfg.run_dir()

    try:
        if args.command in COMMAND_STAGES:
            run_pipeline(cfg, run_dir, resume=args.resume, stages=COMMAND_STAGES[args.command])
        elif args.command == "run":
            run_pipeline(cfg, run_dir, resume=args.resume)
            emit_report(run_dir)
        elif args.command == "report":
            for path in emit_report(run_dir):
                print(path)
        elif args.command == "ablate":
            from .eval import run_ablation_battery

            arms = args.arms.split(",") if args.arms else None
            result = run_ablation_battery(cfg, arms=arms, out_dir=run_dir)
            print(result.directory / "summary.csv")
            if result.failures:
                for (arm, seed), err in sorted(result.failures.items()):
                    print(f"arm {arm} seed {seed} failed: {err}", file=sys.stderr)
    except StageFailure as exc:
        print(f"stage failure in {exc.stage}: {exc.cause}", file=sys.stderr)
        return EXIT_STAGE
    except ReportError as exc:
        print(f"stage failure in report: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except ValueError as exc:
        # e.g. an unknown arm name
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
