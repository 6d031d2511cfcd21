"""Command line entry point.

Every subcommand reads ``--config`` (JSON) and works inside ``--out``;
per-seed artifacts live in ``<out>/seed_<seed>/``.  Exit status is 0 on
success, 1 on a usage or configuration error and 2 when a phase fails.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .analysis import FIGURES, emit_analysis
from .config import ConfigError, ExperimentConfig
from .pipeline import (
    MissingArtifactError,
    PhaseError,
    collect_report,
    discover,
    evaluate_run,
    identify,
    run_baselines,
    run_pipeline,
    seed_dir,
    simulate,
    train_predictor,
)

EXIT_OK, EXIT_USAGE, EXIT_PHASE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _stage_train_predictor(config, seed, run_dir):
    train_predictor(config, seed, run_dir)
    if config.baselines:
        run_baselines(config, seed, run_dir)
    return evaluate_run(config, seed, run_dir)


STAGED = {
    "simulate": simulate,
    "train-ivae": identify,
    "discover": discover,
    "train-predictor": _stage_train_predictor,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="icrl", description="Invariant causal representation learning experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in (*STAGED, "run-pipeline", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", help="output root (default: the config's out_dir)")
        if name != "report":
            p.add_argument("--seed", type=int, help="run a single seed (default: all seeds for run-pipeline, "
                                                    "the first seed otherwise)")
        if name in ("discover", "train-predictor", "run-pipeline"):
            p.add_argument("--phase2-off", action="store_true",
                           help="skip parent discovery and regress on every latent dimension")
        if name == "report":
            p.add_argument("--figures", nargs="*", choices=FIGURES, default=list(FIGURES),
                           help="analysis tables to emit")
    return parser


def _load_config(args) -> ExperimentConfig:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    config = ExperimentConfig.load(path)
    if getattr(args, "phase2_off", False):
        config = dataclasses.replace(config, phase2=False)
    return config


def _run(args) -> None:
    config = _load_config(args)
    out = Path(args.out or config.out_dir)
    if args.command in STAGED:
        seed = config.first_seed if args.seed is None else args.seed
        STAGED[args.command](config, seed, seed_dir(out, seed))
        print(f"{args.command}: wrote {seed_dir(out, seed)}")
    elif args.command == "run-pipeline":
        seeds = None if args.seed is None else [args.seed]
        report = run_pipeline(config, seeds, out)
        print(report.table(), end="")
        print(f"report written to {out / 'report.json'}")
    else:
        seeds = [int(p.name.split("_", 1)[1]) for p in sorted(out.glob("seed_*"))
                 if (p / "report.json").exists()]
        if not seeds:
            raise MissingArtifactError("seed_*/report.json", out)
        report = collect_report(config, out, sorted(seeds))
        report.save(out)
        for which in args.figures:
            for path in emit_analysis(report, which, out):
                print(f"{which}: {path}")
        print(report.table(), end="")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _run(args)
    except UsageError as exc:
        msg = str(exc)
        print(msg if msg.startswith("usage") else f"{parser.format_usage()}{msg}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"{parser.format_usage()}config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PhaseError, MissingArtifactError) as exc:
        print(f"phase failure: {exc}", file=sys.stderr)
        return EXIT_PHASE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
