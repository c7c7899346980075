"""``umind`` command-line entry point.

Exit codes:
    0  success
    1  other package error
    2  configuration error (bad/unknown keys, refused overwrite, incompatible checkpoint)
    3  data error (missing/corrupt files, zero-shot violation, protocol mismatch)
    4  numerical abort (non-finite loss, failed gradient check)
"""

from __future__ import annotations

import argparse
import logging
import sys

from ..errors import UMindError
from .commands import COMMANDS
from .config import load_config


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="YAML experiment configuration")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs / retrain bridge models")
    p.add_argument("--dry-run", action="store_true", help="validate the configuration and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="umind", description="Multitask M/EEG decoding toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    g = _global_flags()
    sub.add_parser("synth", parents=[g], help="write a synthetic oracle dataset")
    p = sub.add_parser("train", parents=[g], help="train the alignment model")
    p.add_argument("--resume", action="store_true", help="continue from checkpoints/last.umt")
    p.add_argument("--stop-after", type=int, metavar="EPOCHS", help="stop after this many epochs (resumable)")
    p = sub.add_parser("eval", parents=[g], help="zero-shot retrieval and classification")
    p.add_argument("--checkpoint")
    p = sub.add_parser("ablate", parents=[g], help="temporal/spatial ablation grids")
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=["expanding", "sliding", "decreasing", "spatial"])
    p = sub.add_parser("export", parents=[g], help="fit the bridge models and write condition bundles")
    p.add_argument("--checkpoint")
    p = sub.add_parser("metrics", parents=[g], help="score generated images against references")
    p.add_argument("--generated")
    p.add_argument("--reference")
    p.add_argument("--extractor", action="append", help="extractor name or module:function (repeatable)")
    sub.add_parser("check-grads", parents=[g], help="finite-difference gradient check")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    try:
        cfg = load_config(args.config, overrides=overrides)
        return COMMANDS[args.command](cfg, args)
    except UMindError as exc:
        print(f"umind {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
