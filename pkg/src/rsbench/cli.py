"""Command-line interface.

Subcommands: manifest build, stats compute, extract, embeddings
import/export, evaluate, benchmark run, report table/delta.

Exit codes: 0 success, 2 config error, 3 data error, 4 one or more
benchmark cells failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import functools
import struct

import numpy as np
import yaml

from . import __version__
from .datasets import (
    ADAPTERS,
    AdapterSpec,
    build_manifest,
    compute_channel_stats,
    save_stats_preset,
)
from .errors import ConfigError, DataError, RsbenchError
from .evaluation import evaluate
from .extractors import (
    RSEMB1_MAGIC,
    extract_features,
    image_statistics,
    import_embeddings,
    load_bank,
    rcf_extract,
    save_bank,
    write_embeddings,
)
from .preprocess import parse_pipeline
from .runner import (
    ExtractorSpec,
    aggregate,
    build_bank,
    delta_bars,
    delta_csv,
    delta_report,
    load_config,
    read_results,
    render_table,
    run_benchmark,
)
from .raster import DatasetManifest, load_manifest_csv, save_manifest_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CELLS_FAILED = 4

logger = logging.getLogger(__name__)


def _add_dataset_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--adapter", choices=ADAPTERS, help="dataset adapter")
    p.add_argument("--root", type=Path, help="dataset root directory")
    p.add_argument("--manifest", type=Path, help="manifest CSV (alternative to --adapter)")
    p.add_argument("--task", choices=["multiclass", "multilabel"],
                   help="label task (generic-manifest / --manifest)")
    p.add_argument("--name", help="dataset display name")


def _manifest_from_args(args) -> DatasetManifest:
    if args.manifest is not None:
        if args.task is None:
            raise ConfigError("--manifest requires --task")
        return load_manifest_csv(args.manifest, task=args.task, name=args.name)
    if args.adapter is None or args.root is None:
        raise ConfigError("need either --manifest or --adapter with --root")
    spec = AdapterSpec(dataset=args.adapter, root=args.root, name=args.name,
                       task=args.task, verify=getattr(args, "verify", False))
    return build_manifest(spec)


def _parse_bands(text: str | None) -> list[int] | None:
    if text is None or text.lower() in ("all", ""):
        return None
    return [int(tok) for tok in text.split(",")]


def _load_pipeline(path: Path | None):
    if path is None:
        return []
    try:
        records = yaml.safe_load(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read pipeline file {path}: {e}") from e
    return parse_pipeline(records if records is not None else [])


def cmd_manifest_build(args) -> int:
    manifest = _manifest_from_args(args)
    out = args.output or Path("manifest.csv")
    save_manifest_csv(manifest, out)
    counts = manifest.split_counts()
    print(f"wrote {out}: {len(manifest.samples)} samples, "
          f"{manifest.num_classes} classes "
          f"(train={counts['train']}, val={counts['val']}, test={counts['test']})")
    return EXIT_OK


def cmd_stats_compute(args) -> int:
    manifest = _manifest_from_args(args)
    stats = compute_channel_stats(manifest, split=args.split)
    out = args.output or Path("channel_stats.csv")
    save_stats_preset(stats, out)
    for ch, (mean, std) in enumerate(stats):
        print(f"channel {ch}: mean={mean:.6g} std={std:.6g}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    manifest = _manifest_from_args(args)
    band_indices = _parse_bands(args.bands)
    pipeline = _load_pipeline(args.pipeline)
    if args.bank_in is not None:
        fn = functools.partial(rcf_extract, bank=load_bank(args.bank_in))
    elif args.extractor == "image_statistics":
        fn = image_statistics
    else:
        spec = _extractor_spec_from_args(args)
        bank = build_bank(manifest, band_indices, pipeline, spec, args.seed)
        fn = functools.partial(rcf_extract, bank=bank)
        if args.bank_out is not None:
            save_bank(bank, args.bank_out)
            print(f"wrote filter bank {args.bank_out}")
    prefix = Path(args.output or "features")
    for split in args.splits.split(","):
        split = split.strip()
        matrix = extract_features(manifest, band_indices, pipeline, fn, [split],
                                  workers=args.workers)
        values_path = Path(f"{prefix}-{split}.emb")
        ids_path = Path(f"{prefix}-{split}.ids")
        write_embeddings(matrix, values_path, ids_path)
        print(f"wrote {values_path} ({matrix.n} x {matrix.dim}) and {ids_path}")
    return EXIT_OK


def _extractor_spec_from_args(args) -> ExtractorSpec:
    kind = args.extractor
    if kind == "image_statistics":
        return ExtractorSpec(kind=kind, name=kind)
    return ExtractorSpec(
        kind=kind,
        name=kind,
        features=args.features,
        kernel_size=args.kernel_size,
        n_patches=args.n_patches,
        epsilon=args.epsilon,
    )


def cmd_embeddings_import(args) -> int:
    manifest = _manifest_from_args(args)
    matrix = import_embeddings(args.values, args.ids, manifest)
    print(f"{args.values}: {matrix.n} rows x {matrix.dim} dims, "
          f"all ids resolve against {manifest.name!r}")
    if args.output is not None:
        write_embeddings(matrix, args.output, Path(str(args.output) + ".ids"))
        print(f"rewrote canonical copy at {args.output}")
    return EXIT_OK


def cmd_embeddings_export(args) -> int:
    data = Path(args.values).read_bytes()
    if not data.startswith(RSEMB1_MAGIC):
        raise DataError(f"{args.values}: not an RSEMB1 file")
    n, d = struct.unpack_from("<II", data, len(RSEMB1_MAGIC))
    values = np.frombuffer(data, dtype="<f4", count=n * d,
                           offset=len(RSEMB1_MAGIC) + 8).reshape(n, d)
    ids = [ln for ln in Path(args.ids).read_text().splitlines() if ln]
    if len(ids) != n:
        raise DataError(f"{args.ids}: {len(ids)} ids for {n} rows")
    out = args.output or Path("embeddings.csv")
    with open(out, "w") as f:
        f.write("id," + ",".join(f"f{i}" for i in range(d)) + "\n")
        for sid, row in zip(ids, values):
            f.write(sid + "," + ",".join(repr(float(v)) for v in row) + "\n")
    print(f"wrote {out} ({n} rows x {d} dims)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    manifest = _manifest_from_args(args)
    train = import_embeddings(args.train_values, args.train_ids, manifest)
    test = import_embeddings(args.test_values, args.test_ids, manifest)
    report = evaluate(train, test, k=args.k)
    text = report.to_json()
    print(text)
    if args.output is not None:
        Path(args.output).write_text(text + "\n")
    return EXIT_OK


def cmd_benchmark_run(args) -> int:
    if args.config is None:
        raise ConfigError("benchmark run requires --config")
    config = load_config(args.config)
    if args.output is not None:
        config.output_dir = Path(args.output)
    results = run_benchmark(config, workers=args.workers)
    failed = [r for r in results if r.error is not None]
    print(f"{len(results) - len(failed)} cells ok, {len(failed)} failed "
          f"(results in {config.output_dir / 'results.jsonl'})")
    for r in failed:
        print(f"  FAILED {r.key}: {r.error}", file=sys.stderr)
    return EXIT_CELLS_FAILED if failed else EXIT_OK


def cmd_report_table(args) -> int:
    results = read_results(args.results)
    if not results:
        raise DataError(f"no results in {args.results}")
    text = render_table(aggregate(results), fmt=args.format)
    if args.output is not None:
        Path(args.output).write_text(text)
        print(f"wrote {args.output}")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_report_delta(args) -> int:
    results = read_results(args.results)
    if not results:
        raise DataError(f"no results in {args.results}")
    deltas = delta_report(results, args.pipeline_a, args.pipeline_b)
    csv_text = delta_csv(deltas, args.pipeline_a, args.pipeline_b)
    if args.output is not None:
        Path(args.output).write_text(csv_text)
        print(f"wrote {args.output}")
    print(delta_bars(deltas), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rsbench",
        description="Baseline feature extractors and KNN evaluation for "
                    "remote-sensing classification benchmarks",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", type=Path, help="benchmark config file")
    parser.add_argument("--workers", type=int, default=1,
                        help="worker threads for extraction")
    parser.add_argument("--seed", type=int, default=0, help="seed for stochastic steps")
    parser.add_argument("--output", type=Path, help="output file or directory")
    parser.add_argument("--verify", action="store_true",
                        help="verify every manifest image is decodable")
    sub = parser.add_subparsers(dest="command", required=True)

    p_manifest = sub.add_parser("manifest", help="dataset manifest commands")
    sub_manifest = p_manifest.add_subparsers(dest="subcommand", required=True)
    p = sub_manifest.add_parser("build", help="index a dataset into a manifest CSV")
    _add_dataset_args(p)
    p.set_defaults(func=cmd_manifest_build)

    p_stats = sub.add_parser("stats", help="dataset statistics commands")
    sub_stats = p_stats.add_subparsers(dest="subcommand", required=True)
    p = sub_stats.add_parser("compute", help="train-split channel mean/std preset")
    _add_dataset_args(p)
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_stats_compute)

    p = sub.add_parser("extract", help="extract features to RSEMB1 files")
    _add_dataset_args(p)
    p.add_argument("--extractor", default="image_statistics",
                   choices=["image_statistics", "rcf_random", "rcf_empirical"])
    p.add_argument("--bands", help="comma-separated band indices, or 'all'")
    p.add_argument("--pipeline", type=Path, help="YAML file with pipeline steps")
    p.add_argument("--splits", default="train,test")
    p.add_argument("--features", type=int, default=512)
    p.add_argument("--kernel-size", type=int, default=3)
    p.add_argument("--n-patches", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--bank-in", type=Path, help="reuse a saved filter bank")
    p.add_argument("--bank-out", type=Path, help="save the filter bank")
    p.set_defaults(func=cmd_extract)

    p_emb = sub.add_parser("embeddings", help="embedding file commands")
    sub_emb = p_emb.add_subparsers(dest="subcommand", required=True)
    p = sub_emb.add_parser("import", help="validate external embeddings against a manifest")
    _add_dataset_args(p)
    p.add_argument("--values", type=Path, required=True)
    p.add_argument("--ids", type=Path, required=True)
    p.set_defaults(func=cmd_embeddings_import)
    p = sub_emb.add_parser("export", help="convert RSEMB1 embeddings to CSV")
    p.add_argument("--values", type=Path, required=True)
    p.add_argument("--ids", type=Path, required=True)
    p.set_defaults(func=cmd_embeddings_export)

    p = sub.add_parser("evaluate", help="KNN-evaluate train/test embedding files")
    _add_dataset_args(p)
    p.add_argument("--train-values", type=Path, required=True)
    p.add_argument("--train-ids", type=Path, required=True)
    p.add_argument("--test-values", type=Path, required=True)
    p.add_argument("--test-ids", type=Path, required=True)
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(func=cmd_evaluate)

    p_bench = sub.add_parser("benchmark", help="benchmark runner commands")
    sub_bench = p_bench.add_subparsers(dest="subcommand", required=True)
    p = sub_bench.add_parser("run", help="run all cells in a benchmark config")
    p.set_defaults(func=cmd_benchmark_run)

    p_report = sub.add_parser("report", help="result reporting commands")
    sub_report = p_report.add_subparsers(dest="subcommand", required=True)
    p = sub_report.add_parser("table", help="aggregate results into a table")
    p.add_argument("--results", type=Path, required=True)
    p.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    p.set_defaults(func=cmd_report_table)
    p = sub_report.add_parser("delta", help="pipeline-to-pipeline metric deltas")
    p.add_argument("--results", type=Path, required=True)
    p.add_argument("--from", dest="pipeline_a", required=True)
    p.add_argument("--to", dest="pipeline_b", required=True)
    p.set_defaults(func=cmd_report_delta)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except RsbenchError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
