"""Command-line entry point.

Subcommands cover the whole pipeline: gen-data, train-par, eval-par,
train-ret, eval-ret, search.  Every command exits 0 on success and non-zero
with a single-line diagnostic on failure.
"""

from __future__ import annotations

import argparse
import sys

from .config import resolve_config
from .errors import ParrError
from .schema import demo_schema_full, demo_schema_small, load_schema


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file")
    p.add_argument("--seed", type=int, help="seed override (beats PARR_SEED)")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value; repeatable",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="parr",
        description="Attribute recognition and attribute-based person retrieval.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument(
        "--schema",
        default="small",
        help="'small', 'full', or a path to a schema JSON file",
    )

    p = sub.add_parser("train-par", help="train the attribute recognizer")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--report-dir", help="where to put the loss curve CSV/PNG")

    p = sub.add_parser("eval-par", help="evaluate recognition metrics")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument(
        "--split",
        default="test",
        choices=["train", "gallery", "query", "test"],
        help="'test' means gallery+query combined",
    )
    p.add_argument("--out", help="report JSON path (stdout summary otherwise)")

    p = sub.add_parser("train-ret", help="margin-train the retrieval adapters")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--par-ckpt", required=True)
    p.add_argument("--out", required=True, help="output heads checkpoint path")
    p.add_argument("--report-dir")

    p = sub.add_parser("eval-ret", help="evaluate retrieval metrics")
    _add_common(p)
    p.add_argument("--ckpt", required=True, help="backbone checkpoint")
    p.add_argument("--heads", required=True, help="heads checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument(
        "--query-mode", choices=["hard", "soft", "word", "hard+soft"], default=None
    )
    p.add_argument("--out", help="report JSON path")

    p = sub.add_parser("search", help="rank the gallery for a file of queries")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--heads", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--queries", required=True, help="JSON lines, one 0/1 array each")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", required=True, help="results JSONL path")

    return parser


def _schema_from_arg(arg: str):
    if arg == "small":
        return demo_schema_small()
    if arg == "full":
        return demo_schema_full()
    return load_schema(arg)


def _run(args: argparse.Namespace) -> int:
    from . import pipeline

    cfg = resolve_config(args.config, args.overrides, args.seed)
    if args.command == "gen-data":
        manifest = pipeline.run_gen_data(cfg, _schema_from_arg(args.schema), args.out)
        print(f"wrote {len(manifest.records)} records to {args.out}")
    elif args.command == "train-par":
        ckpt, curve = pipeline.run_train_par(cfg, args.data, args.out, args.report_dir)
        print(f"trained {len(curve)} steps, final loss {curve[-1]:.4f} -> {ckpt}")
    elif args.command == "eval-par":
        report = pipeline.run_eval_par(cfg, args.ckpt, args.data, args.split, args.out)
        print(f"mA {report['mA']:.4f}  F1 {report['F1']:.4f}  split={args.split}")
    elif args.command == "train-ret":
        heads, curve = pipeline.run_train_ret(
            cfg, args.data, args.par_ckpt, args.out, args.report_dir
        )
        print(f"trained {len(curve)} steps, final loss {curve[-1]:.4f} -> {heads}")
    elif args.command == "eval-ret":
        report = pipeline.run_eval_ret(
            cfg, args.ckpt, args.heads, args.data, args.query_mode, args.out
        )
        print(
            f"mAP {report['mAP']:.4f}  R1 {report['R1']:.4f}  "
            f"R5 {report['R5']:.4f}  R10 {report['R10']:.4f}  "
            f"mode={report['query_mode']}"
        )
    elif args.command == "search":
        n = pipeline.run_search(
            cfg, args.ckpt, args.heads, args.data, args.queries, args.k, args.out
        )
        print(f"ranked {n} queries -> {args.out}")
    else:  # pragma: no cover - argparse enforces the choices
        raise ParrError(f"unknown command {args.command}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except ParrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
