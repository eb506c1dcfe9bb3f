"""``refex`` command line: gen-data, train, eval, report and pipeline."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import ConfigError, load_config

EXIT_OK, EXIT_CONFIG, EXIT_MISSING = 0, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON (defaults apply to missing keys)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config entry, e.g. --set proxy.lam=2 (repeatable)")
    p.add_argument("--seed", type=int, help="master seed (beats REFEX_SEED and the config)")
    p.add_argument("--out", help="output directory (config key output_dir)")
    p.add_argument("--overwrite", action="store_true",
                   help="replace existing stage directories instead of writing timestamped ones")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refex", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write train/val/test scene splits and the vocabulary")
    _common(p)

    p = sub.add_parser("train", help="train one model")
    _common(p)
    p.add_argument("--model", required=True, choices=pipeline.MODELS)

    p = sub.add_parser("eval", help="decode a split and score it")
    _common(p)
    p.add_argument("--mode", default="greedy", choices=pipeline.EVAL_MODES,
                   help="greedy decoding, generate-and-rerank, or lowest-perplexity sample")
    p.add_argument("--gen", help="generator checkpoint path or model name (default gen-mle)")
    p.add_argument("--comp", help="comprehender checkpoint path or model name (default comp)")
    p.add_argument("--comp-independent", help="a second comprehender used only as a judge")

    p = sub.add_parser("report", help="tabulate every evaluation under a directory")
    p.add_argument("--dir", required=True)

    p = sub.add_parser("pipeline", help="gen-data, all models, evaluation and report")
    _common(p)
    p.add_argument("--models", nargs="+", choices=pipeline.MODELS,
                   default=["comp"] + list(pipeline.GEN_MODELS))
    return parser


def run(args: argparse.Namespace) -> int:
    if args.command == "report":
        pipeline.report(args.dir)
        return EXIT_OK
    overrides = list(args.overrides)
    if args.out:
        overrides.append("output_dir=" + json.dumps(args.out))
    cfg = load_config(args.config, overrides, args.seed)
    ws = pipeline.Workspace(cfg.output_dir, args.overwrite)
    if args.command == "gen-data":
        pipeline.gen_data(cfg, ws)
    elif args.command == "train":
        pipeline.train(cfg, ws, args.model)
    elif args.command == "eval":
        pipeline.evaluate(cfg, ws, args.mode, args.gen, args.comp, args.comp_independent)
    elif args.command == "pipeline":
        pipeline.run_all(cfg, ws, args.models)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as e:
        print(f"refex: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.MissingPrerequisite as e:
        print(f"refex: {e}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
