"""Command-line entry point.

    monoattr run [--config FILE] [key=value ...]
    monoattr <stage> [--config FILE] [key=value ...]

Stages: generate, train-classifier, train-sae, attribute, train-optimizer,
evaluate, embed, export, report.  Overrides use the config file's dotted keys,
e.g. ``distribution=ood`` or ``optimizer.steps=50``.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .cohort import ConfigError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="monoattr", description="Attribution, SAE and explanation-optimizer runs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ["run", *pipeline.STAGES, "show-config"]:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("overrides", nargs="*", metavar="key=value")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config = pipeline.load_config(args.config, args.overrides)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return 2
    if args.command == "show-config":
        sys.stdout.write(config.to_text())
        return 0
    try:
        if args.command == "run":
            out = pipeline.run_pipeline(config)
        else:
            pipeline.run_stage(config, args.command)
            out = config.dist_dir
    except pipeline.StageError as exc:
        print(f"error [{exc.stage}]: {exc.cause}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
