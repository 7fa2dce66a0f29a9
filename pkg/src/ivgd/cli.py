"""Command-line entry point.

Exit codes: 0 success, 2 configuration/validation error, 3 numeric or
certification failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigError, FormatError, NumericError, ValidationError
from .pipeline import ABLATIONS, STAGES, Run, echo_config, run_ablation, run_pipeline, run_stage, seeds_of

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# subcommand -> pipeline stage
_STAGE_COMMANDS = {
    "generate": "generate",
    "train-forward": "train-forward",
    "certify": "certify",
    "invert": "invert",
    "train-localizer": "train-localizer",
    "localize": "localize",
    "evaluate": "evaluate",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common(p):
    p.add_argument("--config", metavar="PATH", help="INI experiment config (defaults: Karate)")
    p.add_argument("--seed", type=int, help="run a single seed instead of cascade.seeds")
    p.add_argument("--out", metavar="DIR", help="output directory (default: output.dir)")
    p.add_argument("--known-source-count", type=int, metavar="N",
                   help="activate the source-count constraint at inference with b = N")
    p.add_argument("--force", action="store_true", help="rerun stages even if their artifacts are current")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="ivgd", description="Invertible graph-diffusion source localization")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in _STAGE_COMMANDS:
        _common(sub.add_parser(name, help=f"run the {name} stage"))
    base = sub.add_parser("baseline", help="run a baseline")
    bsub = base.add_subparsers(dest="baseline", required=True, parser_class=_Parser)
    _common(bsub.add_parser("lpsi", help="label-propagation source identification"))
    abl = sub.add_parser("ablate", help="retrain the head without one component")
    _common(abl)
    abl.add_argument("--variant", required=True, choices=ABLATIONS)
    pipe = sub.add_parser("pipeline", help="run all stages")
    _common(pipe)
    pipe.add_argument("--stage", choices=STAGES, help="stop after this stage")
    return parser


def _run(args):
    cfg = load_config(args.config)
    out = args.out or cfg.output.dir
    if args.command == "pipeline":
        rows = run_pipeline(cfg, out, args.seed, args.stage, args.known_source_count)
        for row in rows:
            print(f"{row['method']}\tseed={row['seed']}\tFS={row['fs']:.4f}\tAUC={row['auc']}")
        return
    if args.command == "ablate":
        for row in run_ablation(cfg, args.variant, out, args.seed, args.known_source_count):
            print(f"{row['method']}\tseed={row['seed']}\tFS={row['fs']:.4f}")
        return
    stage = "baseline-lpsi" if args.command == "baseline" else _STAGE_COMMANDS[args.command]
    echo_config(cfg, out)
    for s in seeds_of(cfg, args.seed):
        run = Run(cfg, s, out, args.known_source_count)
        ran = run_stage(run, stage, force=args.force)
        print(f"seed {s}: {stage} {'done' if ran else 'up to date'} -> {run.dir}")


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"ivgd: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except (ConfigError, ValidationError, FormatError, OSError) as exc:
        _report(exc)
        return EXIT_CONFIG
    except NumericError as exc:
        _report(exc)
        return EXIT_NUMERIC
    return EXIT_OK


def _report(exc):
    stage = getattr(exc, "stage", None)
    where = f" in stage {stage}" if stage else ""
    print(f"ivgd: error{where}: {exc}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
