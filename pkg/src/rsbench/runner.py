"""Benchmark orchestration: config parsing, cell execution with append-only
JSON-lines persistence (so long runs resume after interruption), seed
aggregation into mean +/- std rows, pipeline-delta reports, and table
rendering.

A cell is one (dataset, bands, pipeline, extractor, seed, k) combination.
Deterministic extractors run once per cell; stochastic ones once per seed.
Seeds drive only extractor initialization, never data order or evaluation.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import yaml

from . import __version__
from .datasets import AdapterSpec, build_manifest
from .errors import ConfigError, MissingCounterpart, RsbenchError
from .evaluation import MetricReport, evaluate
from .extractors import (
    extract_features,
    image_statistics,
    import_embeddings,
    rcf_extract,
    rcf_init_empirical,
    rcf_init_random,
    sample_patches,
    zca_fit,
)
from .preprocess import Step, parse_pipeline, step_to_record
from .raster import DatasetManifest, load_raster, select_bands

logger = logging.getLogger(__name__)

METRIC_ORDER = ("oa", "f1_micro", "f1_macro", "map")

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
DEFAULT_PATCH_FACTOR = 16  # patches drawn per requested feature for whitening


@dataclass(frozen=True)
class ExtractorSpec:
    """One extractor axis entry, normalized from its config record."""

    kind: str  # image_statistics | rcf_random | rcf_empirical | import
    name: str
    features: int = 512
    kernel_size: int = 3
    n_patches: int | None = None  # rcf_empirical; None = 16 * features
    epsilon: float | None = None  # rcf_empirical; None = relative default
    import_paths: dict[str, str] | None = None
    # import only: embeddings were computed externally under one preprocessing,
    # so an entry may bind to a single pipeline label (None = all pipelines)
    pipeline: str | None = None

    @property
    def stochastic(self) -> bool:
        return self.kind in ("rcf_random", "rcf_empirical")

    def to_record(self) -> dict:
        rec: dict = {"type": self.kind, "name": self.name}
        if self.kind in ("rcf_random", "rcf_empirical"):
            rec.update(features=self.features, kernel_size=self.kernel_size)
        if self.kind == "rcf_empirical":
            rec.update(n_patches=self.n_patches, epsilon=self.epsilon)
        if self.kind == "import":
            rec.update(paths=self.import_paths, pipeline=self.pipeline)
        return rec


def _parse_extractor(record: dict) -> ExtractorSpec:
    if not isinstance(record, dict) or "type" not in record:
        raise ConfigError(f"extractor must be a mapping with a 'type' key: {record!r}")
    rec = dict(record)
    kind = rec.pop("type")
    name = rec.pop("name", None)
    if kind == "image_statistics":
        spec = ExtractorSpec(kind=kind, name=name or "image_statistics")
    elif kind in ("rcf_random", "rcf_empirical"):
        features = int(rec.pop("features", 512))
        kernel = int(rec.pop("kernel_size", 3))
        n_patches = rec.pop("n_patches", None) if kind == "rcf_empirical" else None
        epsilon = rec.pop("epsilon", None) if kind == "rcf_empirical" else None
        if features % 2 != 0 or features < 2:
            raise ConfigError(f"features must be even and >= 2, got {features}")
        if kernel % 2 != 1 or kernel < 1:
            raise ConfigError(f"kernel_size must be odd and >= 1, got {kernel}")
        spec = ExtractorSpec(
            kind=kind,
            name=name or f"{kind}_F{features}_k{kernel}",
            features=features,
            kernel_size=kernel,
            n_patches=None if n_patches is None else int(n_patches),
            epsilon=None if epsilon is None else float(epsilon),
        )
    elif kind == "import":
        paths = {}
        for key in ("train_values", "train_ids", "test_values", "test_ids"):
            if key not in rec:
                raise ConfigError(f"import extractor needs {key!r}")
            paths[key] = str(rec.pop(key))
        pipeline = rec.pop("pipeline", None)
        spec = ExtractorSpec(kind=kind, name=name or "import", import_paths=paths,
                             pipeline=None if pipeline is None else str(pipeline))
    else:
        raise ConfigError(f"unknown extractor type {kind!r}")
    if rec:
        raise ConfigError(f"unknown keys {sorted(rec)} in extractor {spec.name!r}")
    return spec


@dataclass
class BenchmarkConfig:
    dataset: AdapterSpec
    band_sets: dict[str, list[int] | None]
    pipelines: dict[str, list[Step]]
    extractors: list[ExtractorSpec]
    k: int = 5
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    output_dir: Path = Path("results")

    def __post_init__(self):
        if not self.band_sets or not self.pipelines or not self.extractors:
            raise ConfigError("band_sets, pipelines and extractors must be non-empty")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        keys = [(e.name, e.pipeline) for e in self.extractors]
        if len(set(keys)) != len(keys):
            raise ConfigError(f"duplicate extractor entries: {keys}")
        for e in self.extractors:
            if e.pipeline is not None and e.pipeline not in self.pipelines:
                raise ConfigError(
                    f"extractor {e.name!r} binds to unknown pipeline {e.pipeline!r}"
                )


_CONFIG_KEYS = {"dataset", "band_sets", "pipelines", "extractors", "k", "seeds",
                "output_dir"}
_DATASET_KEYS = {"adapter", "root", "name", "task"}


def config_from_dict(raw: dict, base_dir: Path | None = None) -> BenchmarkConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("dataset", "band_sets", "pipelines", "extractors"):
        if key not in raw:
            raise ConfigError(f"config is missing {key!r}")

    ds = raw["dataset"]
    if not isinstance(ds, dict) or "adapter" not in ds or "root" not in ds:
        raise ConfigError("dataset section needs 'adapter' and 'root'")
    unknown = set(ds) - _DATASET_KEYS
    if unknown:
        raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
    root = Path(ds["root"])
    if base_dir is not None and not root.is_absolute():
        root = base_dir / root
    adapter = AdapterSpec(dataset=ds["adapter"], root=root,
                          name=ds.get("name"), task=ds.get("task"))

    band_sets: dict[str, list[int] | None] = {}
    if not isinstance(raw["band_sets"], dict):
        raise ConfigError("band_sets must map names to band-index lists (or null)")
    for name, indices in raw["band_sets"].items():
        if indices is None:
            band_sets[str(name)] = None
        else:
            band_sets[str(name)] = [int(i) for i in indices]

    if not isinstance(raw["pipelines"], dict):
        raise ConfigError("pipelines must map names to step lists")
    pipelines = {
        str(name): parse_pipeline(steps if steps is not None else [])
        for name, steps in raw["pipelines"].items()
    }

    if not isinstance(raw["extractors"], list):
        raise ConfigError("extractors must be a list")
    extractors = [_parse_extractor(r) for r in raw["extractors"]]

    seeds = raw.get("seeds", list(DEFAULT_SEEDS))
    if not isinstance(seeds, list):
        raise ConfigError("seeds must be a list")
    out_dir = Path(raw.get("output_dir", "results"))
    if base_dir is not None and not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    return BenchmarkConfig(
        dataset=adapter,
        band_sets=band_sets,
        pipelines=pipelines,
        extractors=extractors,
        k=int(raw.get("k", 5)),
        seeds=[int(s) for s in seeds],
        output_dir=out_dir,
    )


def load_config(path: str | Path) -> BenchmarkConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from e
    return config_from_dict(raw, base_dir=path.parent)


def config_hash(config: BenchmarkConfig) -> str:
    """Digest of the semantically meaningful fields (output location is
    excluded; key order and formatting never matter)."""
    payload = {
        "dataset": {
            "adapter": config.dataset.dataset,
            "root": str(config.dataset.root),
            "name": config.dataset.name,
            "task": config.dataset.task,
        },
        "band_sets": config.band_sets,
        "pipelines": {
            name: [step_to_record(s) for s in steps]
            for name, steps in config.pipelines.items()
        },
        "extractors": [e.to_record() for e in config.extractors],
        "k": config.k,
        "seeds": config.seeds,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class BenchmarkResult:
    dataset: str
    bands: str
    pipeline: str
    extractor: str
    seed: int | None
    k: int
    report: MetricReport | None
    wall_time: float
    toolkit_version: str
    config_hash: str
    error: str | None = None

    @property
    def key(self) -> str:
        return cell_key(self.dataset, self.bands, self.pipeline, self.extractor,
                        self.seed, self.k)

    def to_record(self) -> dict:
        rec = {
            "dataset": self.dataset,
            "bands": self.bands,
            "pipeline": self.pipeline,
            "extractor": self.extractor,
            "seed": self.seed,
            "k": self.k,
            "status": "ok" if self.error is None else "error",
            "wall_time": round(self.wall_time, 3),
            "toolkit_version": self.toolkit_version,
            "config_hash": self.config_hash,
        }
        if self.error is None:
            rec["report"] = self.report.to_json_dict()
        else:
            rec["error"] = self.error
        return rec

    @staticmethod
    def from_record(rec: dict) -> "BenchmarkResult":
        report = None
        if rec.get("status") == "ok":
            r = rec["report"]
            report = MetricReport(
                task=r["task"], k=r["k"], n_train=r["n_train"], n_test=r["n_test"],
                dim=r["d"], oa=r.get("oa"), f1_micro=r.get("f1_micro"),
                f1_macro=r.get("f1_macro"), map=r.get("map"),
            )
        return BenchmarkResult(
            dataset=rec["dataset"], bands=rec["bands"], pipeline=rec["pipeline"],
            extractor=rec["extractor"], seed=rec.get("seed"), k=rec["k"],
            report=report, wall_time=rec.get("wall_time", 0.0),
            toolkit_version=rec.get("toolkit_version", "?"),
            config_hash=rec.get("config_hash", "?"), error=rec.get("error"),
        )


def cell_key(dataset: str, bands: str, pipeline: str, extractor: str,
             seed: int | None, k: int) -> str:
    seed_part = "-" if seed is None else str(seed)
    return f"{dataset}|{bands}|{pipeline}|{extractor}|seed={seed_part}|k={k}"


def read_results(path: str | Path) -> list[BenchmarkResult]:
    path = Path(path)
    results = []
    if not path.exists():
        return results
    for line in path.read_text().splitlines():
        if line.strip():
            results.append(BenchmarkResult.from_record(json.loads(line)))
    return results


def run_benchmark(config: BenchmarkConfig, workers: int = 1,
                  results_path: str | Path | None = None) -> list[BenchmarkResult]:
    """Execute every missing cell and append results to the JSONL file.

    Returns the results produced or replayed for this config, error cells
    included; failed cells from earlier runs are retried.
    """
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = Path(results_path) if results_path else out_dir / "results.jsonl"
    existing = {r.key: r for r in read_results(path) if r.error is None}
    chash = config_hash(config)

    manifest = build_manifest(config.dataset)
    results: list[BenchmarkResult] = []
    with open(path, "a") as sink:
        for bands_name, band_indices in config.band_sets.items():
            for pipe_name, pipeline in config.pipelines.items():
                for ext in config.extractors:
                    if ext.pipeline is not None and ext.pipeline != pipe_name:
                        continue
                    seeds = config.seeds if ext.stochastic else [None]
                    for seed in seeds:
                        key = cell_key(manifest.name, bands_name, pipe_name,
                                       ext.name, seed, config.k)
                        if key in existing:
                            results.append(existing[key])
                            continue
                        result = _run_cell(manifest, bands_name, band_indices,
                                           pipe_name, pipeline, ext, seed,
                                           config.k, workers, chash)
                        sink.write(json.dumps(result.to_record()) + "\n")
                        sink.flush()
                        results.append(result)
                        if result.error is None:
                            logger.info("cell %s done in %.1fs", key, result.wall_time)
                        else:
                            logger.error("cell %s failed: %s", key, result.error)
    return results


def _run_cell(manifest: DatasetManifest, bands_name: str,
              band_indices: list[int] | None, pipe_name: str,
              pipeline: Sequence[Step], ext: ExtractorSpec, seed: int | None,
              k: int, workers: int, chash: str) -> BenchmarkResult:
    start = time.perf_counter()
    try:
        if ext.kind == "import":
            p = ext.import_paths
            train = import_embeddings(p["train_values"], p["train_ids"], manifest)
            test = import_embeddings(p["test_values"], p["test_ids"], manifest)
        else:
            fn = _build_extractor(manifest, band_indices, pipeline, ext, seed)
            train = extract_features(manifest, band_indices, pipeline, fn,
                                     ["train"], workers=workers)
            test = extract_features(manifest, band_indices, pipeline, fn,
                                    ["test"], workers=workers)
        report = evaluate(train, test, k=k)
        error = None
    except Exception as e:
        report, error = None, f"{type(e).__name__}: {e}"
    return BenchmarkResult(
        dataset=manifest.name, bands=bands_name, pipeline=pipe_name,
        extractor=ext.name, seed=seed, k=k, report=report,
        wall_time=time.perf_counter() - start, toolkit_version=__version__,
        config_hash=chash, error=error,
    )


def build_bank(manifest, band_indices, pipeline, ext: ExtractorSpec, seed: int):
    """Initialize the filter bank an rcf_* extractor spec describes."""
    if ext.kind == "rcf_random":
        channels = _infer_channels(manifest, band_indices)
        return rcf_init_random(channels, ext.features, ext.kernel_size, seed)
    if ext.kind == "rcf_empirical":
        n_patches = ext.n_patches or DEFAULT_PATCH_FACTOR * ext.features
        patches = sample_patches(manifest, band_indices, pipeline,
                                 ext.kernel_size, n_patches, seed)
        zca = zca_fit(patches, ext.epsilon)
        return rcf_init_empirical(patches, zca, ext.features, seed)
    raise ConfigError(f"extractor {ext.kind!r} has no filter bank")


def _build_extractor(manifest, band_indices, pipeline, ext: ExtractorSpec,
                     seed: int | None):
    if ext.kind == "image_statistics":
        return image_statistics
    bank = build_bank(manifest, band_indices, pipeline, ext, seed)
    return functools.partial(rcf_extract, bank=bank)


def _infer_channels(manifest: DatasetManifest, band_indices) -> int:
    if band_indices is not None:
        return len(band_indices)
    first = manifest.subset(["train"])[0]
    return load_raster(first.image_path).channels


def aggregate(results: Sequence[BenchmarkResult]) -> list[dict]:
    """Group successful cells by (dataset, bands, pipeline, extractor, k)
    and report per-metric mean and sample (n-1) std over seeds."""
    versions = {r.toolkit_version for r in results}
    if len(versions) > 1:
        logger.warning("aggregating results from mixed toolkit versions: %s",
                       sorted(versions))
    groups: dict[tuple, list[BenchmarkResult]] = {}
    for r in results:
        if r.error is not None:
            continue
        groups.setdefault((r.dataset, r.bands, r.pipeline, r.extractor, r.k),
                          []).append(r)
    rows = []
    for (dataset, bands, pipeline, extractor, k), members in sorted(groups.items()):
        metrics = {}
        for name in METRIC_ORDER:
            values = [r.report.metrics().get(name) for r in members]
            values = [v for v in values if v is not None]
            if not values:
                continue
            mean = sum(values) / len(values)
            if len(values) > 1:
                var = sum((v - mean) ** 2 for v in values) / (len(values) - 1)
                std = var ** 0.5
            else:
                std = None
            metrics[name] = {"mean": mean, "std": std}
        rows.append({
            "dataset": dataset, "bands": bands, "pipeline": pipeline,
            "extractor": extractor, "k": k, "n_seeds": len(members),
            "metrics": metrics,
        })
    return rows


def delta_report(results: Sequence[BenchmarkResult], pipeline_a: str,
                 pipeline_b: str) -> list[dict]:
    """Per (dataset, bands, extractor, k, metric): mean(b) - mean(a)."""
    rows = aggregate(results)
    by_group: dict[tuple, dict[str, dict]] = {}
    for row in rows:
        if row["pipeline"] not in (pipeline_a, pipeline_b):
            continue
        group = (row["dataset"], row["bands"], row["extractor"], row["k"])
        by_group.setdefault(group, {})[row["pipeline"]] = row["metrics"]
    deltas = []
    for group, sides in sorted(by_group.items()):
        if pipeline_a not in sides or pipeline_b not in sides:
            missing = pipeline_a if pipeline_a not in sides else pipeline_b
            raise MissingCounterpart(
                f"group {group} has no {missing!r} results to compare"
            )
        dataset, bands, extractor, k = group
        for name in METRIC_ORDER:
            if name in sides[pipeline_a] and name in sides[pipeline_b]:
                deltas.append({
                    "dataset": dataset, "bands": bands, "extractor": extractor,
                    "k": k, "metric": name,
                    "mean_a": sides[pipeline_a][name]["mean"],
                    "mean_b": sides[pipeline_b][name]["mean"],
                    "delta": sides[pipeline_b][name]["mean"]
                             - sides[pipeline_a][name]["mean"],
                })
    return deltas


def delta_csv(deltas: Sequence[dict], pipeline_a: str, pipeline_b: str) -> str:
    lines = [f"dataset,bands,extractor,k,metric,{pipeline_a},{pipeline_b},delta"]
    for d in deltas:
        lines.append(
            f"{d['dataset']},{d['bands']},{d['extractor']},{d['k']},{d['metric']},"
            f"{d['mean_a']:.4f},{d['mean_b']:.4f},{d['delta']:+.4f}"
        )
    return "\n".join(lines) + "\n"


def delta_bars(deltas: Sequence[dict], width: int = 40) -> str:
    """Plain-text bar chart of metric deltas, one row per compared cell."""
    if not deltas:
        return "(no deltas)\n"
    scale = max(abs(d["delta"]) for d in deltas) or 1.0
    lines = []
    for d in deltas:
        n = int(round(abs(d["delta"]) / scale * width))
        bar = ("+" if d["delta"] >= 0 else "-") * n
        label = f"{d['dataset']}/{d['bands']}/{d['extractor']}/{d['metric']}"
        lines.append(f"{label:<48} {d['delta']:+7.2f} {bar}")
    return "\n".join(lines) + "\n"


def render_table(rows: Sequence[dict], fmt: str = "markdown") -> str:
    """Render aggregated rows; markdown bolds the best value per metric
    column and italicizes the second best, CSV carries no styling."""
    if not rows:
        raise RsbenchError("no aggregated rows to render")
    if fmt not in ("markdown", "csv"):
        raise ConfigError(f"unknown table format {fmt!r}")
    metric_names = [m for m in METRIC_ORDER if any(m in r["metrics"] for r in rows)]
    header = ["Dataset", "Bands", "Extractor", "Init", "Size"] + list(metric_names)

    def split_extractor(name: str) -> tuple[str, str]:
        for init in ("random", "empirical"):
            tag = f"rcf_{init}"
            if name == tag or name.startswith(tag + "_"):
                return "RCF", init
        return name, "-"

    best: dict[str, list[float]] = {}
    for m in metric_names:
        values = sorted({r["metrics"][m]["mean"] for r in rows if m in r["metrics"]},
                        reverse=True)
        best[m] = values[:2]

    def cell_text(row: dict, m: str, styled: bool) -> str:
        if m not in row["metrics"]:
            return "-"
        mean = row["metrics"][m]["mean"]
        std = row["metrics"][m]["std"]
        text = f"{mean:.2f}" if std is None else f"{mean:.2f} ± {std:.2f}"
        if styled and best[m] and mean == best[m][0]:
            return f"**{text}**"
        if styled and len(best[m]) > 1 and mean == best[m][1]:
            return f"*{text}*"
        return text

    table_rows = []
    for r in rows:
        extractor, init = split_extractor(r["extractor"])
        table_rows.append([r["dataset"], r["bands"], extractor, init, r["pipeline"]])

    if fmt == "csv":
        lines = [",".join(header)]
        for r, prefix in zip(rows, table_rows):
            cells = prefix + [cell_text(r, m, styled=False) for m in metric_names]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    lines = ["| " + " | ".join(header) + " |",
             "|" + "|".join(["---"] * len(header)) + "|"]
    for r, prefix in zip(rows, table_rows):
        cells = prefix + [cell_text(r, m, styled=True) for m in metric_names]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
