"""Command-line entry point.

Subcommands mirror the pipeline stages (build-dataset, index, train,
generate, evaluate, report); each ablation is a flag rather than a code
edit. Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import metrics as mx, pipeline
from .errors import DataError, NumericalError

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relmix", description=__doc__)
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_stage(name: str, help_text: str):
        stage = sub.add_parser(name, help=help_text)
        stage.add_argument("--config", required=True, help="pipeline config JSON")
        stage.add_argument("--seed", type=int, default=None, help="master seed override")
        stage.add_argument("--single-retriever", action="store_true")
        stage.add_argument("--no-regularizer", action="store_true")
        stage.add_argument("--random-matching", action="store_true")
        stage.add_argument(
            "--decoder", choices=["beam", "topk", "topp", "typical"], default=None
        )
        return stage

    add_stage("build-dataset", "construct the benchmark splits from records")
    add_stage("index", "ingest the corpora and build the inverted index")
    add_stage("train", "train the retriever and generator mixtures")
    generate = add_stage("generate", "decode relationship sentences for a split")
    generate.add_argument("--split", choices=["train", "dev", "test", "all"], default="test")
    evaluate = add_stage("evaluate", "score generations against references")
    evaluate.add_argument("--generations", required=True)
    evaluate.add_argument("--references", required=True)
    report = sub.add_parser("report", help="render a saved report TSV as a table")
    report.add_argument("--tsv", required=True)
    return parser


def _load_config(args: argparse.Namespace) -> pipeline.PipelineConfig:
    config = pipeline.PipelineConfig.load(args.config)
    if args.seed is not None:
        config.apply_master_seed(args.seed)
    if args.single_retriever:
        config.ablations.single_retriever = True
    if args.no_regularizer:
        config.ablations.no_regularizer = True
    if args.random_matching:
        config.ablations.random_matching = True
    if args.decoder is not None:
        config.generator.decoder = args.decoder
    return config


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "report":
            from pathlib import Path

            report = mx.parse_tsv(Path(args.tsv).read_text(encoding="utf-8"))
            print(mx.render_table(report), end="")
            return 0
        config = _load_config(args)
        if args.command == "build-dataset":
            result = pipeline.cmd_build_dataset(config)
            stats = pipeline.ds.stats(result)
            print(pipeline.ds.render_stats(stats), end="")
        elif args.command == "index":
            path = pipeline.cmd_index(config)
            print(f"wrote {path}")
        elif args.command == "train":
            retriever_path, generator_path = pipeline.cmd_train(config)
            print(f"wrote {retriever_path}")
            print(f"wrote {generator_path}")
        elif args.command == "generate":
            path = pipeline.cmd_generate(config, split=args.split)
            print(f"wrote {path}")
        elif args.command == "evaluate":
            report = pipeline.cmd_evaluate(config, args.generations, args.references)
            print(mx.render_table(report), end="")
        else:  # pragma: no cover - argparse enforces the choices
            raise AssertionError(f"unhandled command {args.command}")
        return 0
    except (DataError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return 2
    except NumericalError as exc:
        logger.error("numerical failure: %s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
