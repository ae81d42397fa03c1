"""Command-line entry point.

Subcommands map onto pipeline stage subsets; ``run`` drives the full chain
from one config document.  Exit codes: 0 success, 2 config error, 3 stage
error.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, HypercalError
from .pipeline import (PipelineConfig, StageError, default_config,
                       load_config, run, validate_config)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3

# stages each subcommand executes (in pipeline order); None means the
# config's own stage list
_SUBCOMMAND_STAGES = {
    "simulate": ("simulate",),
    "caldark": ("simulate", "caldark"),
    "calflat": ("simulate", "caldark", "flat-field"),
    "correct": ("simulate", "caldark", "flat-field", "bunch", "interference",
                "stray"),
    "calspec": ("simulate", "caldark", "flat-field", "smile",
                "absolute-shift", "keystone"),
    "geocal": ("simulate", "geocal"),
    "ortho": ("simulate", "geocal", "ortho"),
    "bundle": ("simulate", "caldark", "flat-field", "geocal", "ortho",
               "bundle"),
    "report": ("simulate", "report"),
    "run": None,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hypercal",
        description="Hyperspectral pushbroom simulator and calibration "
                    "pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _SUBCOMMAND_STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage set")
        p.add_argument("--config", help="pipeline config document (JSON)")
        p.add_argument("--seed", type=int, help="random seed override")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--stages",
                       help="comma-separated stage subset of the config")
        p.add_argument("--threads", type=int, default=1,
                       help="worker count (outputs are deterministic "
                            "regardless)")
        p.add_argument("--preset", choices=("vnir", "swir", "dual"),
                       help="sensor preset")
    return parser


def _resolve_config(args) -> PipelineConfig:
    if args.config:
        config = load_config(args.config)
        if args.preset and args.preset != config.preset:
            config = PipelineConfig(stages=config.stages, seed=config.seed,
                                    preset=args.preset, out=config.out,
                                    threads=config.threads)
    else:
        preset = args.preset or ("dual" if args.command == "bundle"
                                 else "vnir")
        config = default_config(preset=preset)

    wanted = _SUBCOMMAND_STAGES[args.command]
    if args.stages:
        wanted = tuple(s.strip() for s in args.stages.split(",") if s.strip())
    if wanted is not None:
        known = [name for name, _ in config.stages]
        for s in wanted:
            if s not in known:
                raise ConfigError(
                    f"--stages: stage {s!r} is not in the config")
        stages = tuple((n, p) for n, p in config.stages if n in wanted)
        # re-check stage-order dependencies on the reduced list
        validate_config({"preset": config.preset,
                         "stages": [{"name": n, **p} for n, p in stages]})
    else:
        stages = config.stages

    return PipelineConfig(
        stages=stages,
        seed=args.seed if args.seed is not None else config.seed,
        preset=config.preset,
        out=args.out if args.out else config.out,
        threads=args.threads if args.threads else config.threads)


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = _resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = run(config)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HypercalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(f"wrote {report.summary_csv} ({len(report.metrics)} metrics)")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
