"""Command-line entry point (``python -m dpil <command>``).

Every command reads the same YAML config and runs the pipeline restricted to
the stages it names; upstream stages are taken from checkpoints or computed.
Settings resolve as config file < DPIL_SEED / DPIL_OUT < --seed / --out.

Exit codes: 0 success, 1 invalid config or arguments, 2 runtime failure.
"""

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, parse_config, validate_config
from .harness import StageError, run_pipeline

DEFAULT_SWEEP_GRID = [0.005, 0.01, 0.03, 0.05, 0.1, 0.2]

COMMANDS = {
    "gen-demos": (["demos"], "generate optimal and imperfect demonstration sets"),
    "train-diffusion": (["diffusion"], "train the noise predictor on optimal demos"),
    "purify": (["purify"], "diffuse and denoise every imperfect set"),
    "train-bc": (["bc"], "behavioral cloning on raw and purified sets"),
    "train-gail": (["gail"], "adversarial imitation on a purified set"),
    "eval-mmd": (["mmd"], "MMD of raw and purified sets to held-out optimal demos"),
    "sweep-t": (["sweep"], "DP-BC return across a grid of purification times"),
    "filter-baseline": (["filters"], "behavioral cloning on temporally smoothed sets"),
    "ttest": (["bc", "filters", "ttest"], "one-sided Welch tests across replicates"),
    "run": (None, "full pipeline"),
}


class UsageError(Exception):
    pass


def build_parser():
    parser = argparse.ArgumentParser(prog="dpil", description="Diffusion-purified imitation learning toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="YAML run config (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="root seed (overrides DPIL_SEED and the config)")
        p.add_argument("--out", help="output directory (overrides DPIL_OUT and the config)")
        p.add_argument("--workers", type=int, default=1, help="worker processes; results do not depend on it")
    return parser


def resolve_config(args, environ=None):
    environ = os.environ if environ is None else environ
    cfg = validate_config(args.config) if args.config else RunConfig()
    changes = {}
    if environ.get("DPIL_SEED"):
        try:
            changes["seed"] = int(environ["DPIL_SEED"])
        except ValueError:
            raise ConfigError([f"DPIL_SEED: expected an integer, got {environ['DPIL_SEED']!r}"]) from None
    if environ.get("DPIL_OUT"):
        changes["out"] = environ["DPIL_OUT"]
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    if args.command == "sweep-t" and not cfg.purify.sweep_grid:
        cfg = dataclasses.replace(cfg, purify=dataclasses.replace(cfg.purify, sweep_grid=list(DEFAULT_SWEEP_GRID)))
    if args.command == "train-gail" and "gail" not in cfg.learner.kinds:
        cfg = dataclasses.replace(cfg, learner=dataclasses.replace(cfg.learner, kinds=[*cfg.learner.kinds, "gail"]))
    # re-validate so overrides go through the same checks
    return parse_config(dataclasses.replace(cfg, **changes).to_dict())


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        cfg = resolve_config(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 1
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    stages, _ = COMMANDS[args.command]
    if stages is not None and "filters" in stages and not cfg.eval.filters:
        stages = [s for s in stages if s != "filters"]
    out_dir = Path(cfg.out) if stages is None else Path(cfg.out) / args.command
    try:
        report = run_pipeline(cfg, workers=args.workers, stages=stages, out_dir=out_dir)
    except StageError as exc:
        print(f"error: {exc}; partial report in {out_dir}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {out_dir / 'report.json'} ({len(report.tables())} tables)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
