"""Command-line entry point.

Subcommands mirror the pipeline stages: ``train-ann``, ``distill``,
``explain``, ``faithfulness``, ``debug-dataset``, ``sweep-inducing``.
Usage mistakes (unknown subcommand or flag, malformed flag values) exit
with status 2; diagnosed runtime failures print one message to stderr and
exit with status 1.
"""

from __future__ import annotations

import argparse
import sys

from . import pipelines
from .config import default_config, load_config
from .errors import GpdistillError

__all__ = ["main"]


def _parse_indices(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"bad index list {text!r}") from err


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpdistill",
        description="Distill a trained predictor into per-head GPs and "
                    "explain its predictions with inducing-point neighbors.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def stage(name: str, help_text: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", default=None, metavar="PATH",
                        help="INI config file (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, default=0,
                        help="run seed for model init and training")
        sp.add_argument("--out", default="out", metavar="DIR",
                        help="directory for report files (created if missing)")
        return sp

    sp = stage("train-ann", "train the predictor and checkpoint it")
    sp.add_argument("--checkpoint", default=None, metavar="PATH",
                    help="where to write the checkpoint (default OUT/model.ckpt)")

    sp = stage("distill", "fit the per-head GPs against the predictor")
    sp.add_argument("--checkpoint", default=None, metavar="PATH",
                    help="checkpoint to start from (trains inline when omitted)")
    sp.add_argument("--max-iter", type=int, default=None,
                    help="override the configured distillation iteration count")

    sp = stage("explain", "nearest inducing neighbors for test instances")
    sp.add_argument("--checkpoint", required=True, metavar="PATH",
                    help="distilled checkpoint to explain")
    sp.add_argument("--indices", type=_parse_indices, default=[0],
                    metavar="I,J,...", help="test-set indices to explain")

    sp = stage("faithfulness", "GP-vs-predictor agreement on the test set")
    sp.add_argument("--checkpoint", required=True, metavar="PATH",
                    help="distilled checkpoint to evaluate")

    stage("debug-dataset", "rank training instances to surface label noise")
    stage("sweep-inducing", "faithfulness across inducing-set sizes")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config) if args.config else default_config()
        if args.command == "train-ann":
            pipelines.run_train_ann(cfg, args.seed, args.out,
                                    checkpoint_path=args.checkpoint)
        elif args.command == "distill":
            pipelines.run_distill(cfg, args.seed, args.out,
                                  checkpoint_path=args.checkpoint,
                                  max_iter=args.max_iter)
        elif args.command == "explain":
            pipelines.run_explain(cfg, args.seed, args.out,
                                  checkpoint_path=args.checkpoint,
                                  indices=args.indices)
        elif args.command == "faithfulness":
            pipelines.run_faithfulness(cfg, args.seed, args.out,
                                       checkpoint_path=args.checkpoint)
        elif args.command == "debug-dataset":
            pipelines.run_debug_dataset(cfg, args.seed, args.out)
        else:
            pipelines.run_sweep_inducing(cfg, args.seed, args.out)
    except (GpdistillError, OSError) as err:
        print(f"gpdistill: error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
