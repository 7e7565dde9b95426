"""``python -m slip``: gen-data, pretrain, evaluate, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from ..errors import CheckpointError, ConfigError, DataError, NumericalError
from .commands import cmd_evaluate, cmd_gen_data, cmd_gradcheck, cmd_pretrain, load_gen_spec
from .config import MODES, ExperimentConfig, load_config

EXIT_OK = 0
EXIT_FAILED = 1  # gradcheck failure or an unexpected error
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_CHECKPOINT = 5

logger = logging.getLogger("slip")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="python -m slip", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic image-caption corpus")
    g.add_argument("--config", help="YAML data spec (defaults used when omitted)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int)

    t = sub.add_parser("pretrain", help="train a model in the configured mode")
    t.add_argument("--config", required=True, help="YAML experiment config")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="run directory (overrides out_dir)")
    t.add_argument("--mode-override", choices=MODES, help="replace the configured mode")
    t.add_argument("--until-step", type=int, help="stop after this many steps (the schedule is unchanged)")

    e = sub.add_parser("evaluate", help="zero-shot, linear-probe and finetune accuracy of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--config", required=True, help="YAML experiment config (data and eval sections are used)")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", help="where eval_summary.json goes (default: the run directory)")

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--instances", type=int, default=10)
    return p


def _experiment(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None) and args.command == "pretrain":
        changes["out_dir"] = args.out
    if getattr(args, "mode_override", None):
        changes["mode"] = args.mode_override
    try:
        cfg = cfg.replace(**changes) if changes else cfg
    except ConfigError as exc:
        raise ConfigError(f"after command-line overrides: {exc}") from exc
    # relative paths inside the config resolve against the config's directory
    return cfg, Path(args.config).resolve().parent


def run(args) -> int:
    if args.command == "gen-data":
        from .commands import GenDataSpec

        spec = load_gen_spec(args.config) if args.config else GenDataSpec()
        counts = cmd_gen_data(spec, args.out, args.seed)
        print(json.dumps(counts, sort_keys=True))
        return EXIT_OK
    if args.command == "pretrain":
        cfg, base = _experiment(args)
        run_dir = cmd_pretrain(cfg, base, resume=args.resume, until_step=args.until_step)
        print(run_dir)
        return EXIT_OK
    if args.command == "evaluate":
        cfg, base = _experiment(args)
        summary = cmd_evaluate(args.checkpoint, cfg, base, args.out)
        print(json.dumps(summary, indent=2, sort_keys=True))
        return EXIT_OK
    if args.command == "gradcheck":
        result = cmd_gradcheck(args.instances, args.seed)
        print(result.format())
        return EXIT_OK if result.passed else EXIT_FAILED
    raise AssertionError(args.command)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
