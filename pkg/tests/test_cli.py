import json

import numpy as np
import pytest
import yaml

from rsbench.cli import main
from rsbench.datasets import SyntheticSpec, generate_synthetic


@pytest.fixture
def dataset_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("clids")
    spec = SyntheticSpec(n_per_class=8, num_classes=3, channels=2, height=8,
                         width=8, seed=7, separation=8.0)
    generate_synthetic(spec, root)
    return root


def test_manifest_build(dataset_root, tmp_path, capsys):
    out = tmp_path / "m.csv"
    code = main(["--output", str(out), "manifest", "build",
                 "--adapter", "synthetic", "--root", str(dataset_root)])
    assert code == 0
    assert out.exists()
    assert "24 samples" in capsys.readouterr().out


def test_manifest_build_bad_adapter_args(tmp_path):
    code = main(["manifest", "build", "--root", str(tmp_path)])
    assert code == 2  # config error: no adapter


def test_manifest_build_missing_data(tmp_path):
    code = main(["manifest", "build", "--adapter", "synthetic",
                 "--root", str(tmp_path / "nowhere")])
    assert code == 3  # data error


def test_stats_compute(dataset_root, tmp_path, capsys):
    out = tmp_path / "stats.csv"
    code = main(["--output", str(out), "stats", "compute",
                 "--adapter", "synthetic", "--root", str(dataset_root)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "channel,mean,std"
    assert len(lines) == 3


def test_extract_evaluate_round_trip(dataset_root, tmp_path, capsys):
    prefix = tmp_path / "feat"
    code = main(["--output", str(prefix), "extract",
                 "--adapter", "synthetic", "--root", str(dataset_root),
                 "--extractor", "image_statistics"])
    assert code == 0
    for split in ("train", "test"):
        assert (tmp_path / f"feat-{split}.emb").exists()

    code = main(["evaluate",
                 "--adapter", "synthetic", "--root", str(dataset_root),
                 "--train-values", str(tmp_path / "feat-train.emb"),
                 "--train-ids", str(tmp_path / "feat-train.ids"),
                 "--test-values", str(tmp_path / "feat-test.emb"),
                 "--test-ids", str(tmp_path / "feat-test.ids"),
                 "--k", "3"])
    assert code == 0
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert report["task"] == "multiclass"
    assert report["k"] == 3
    assert report["oa"] > 50.0


def test_extract_rcf_with_bank_round_trip(dataset_root, tmp_path, capsys):
    bank_path = tmp_path / "bank.rcf"
    code = main(["--output", str(tmp_path / "a"), "--seed", "3", "extract",
                 "--adapter", "synthetic", "--root", str(dataset_root),
                 "--extractor", "rcf_random", "--features", "8",
                 "--splits", "test", "--bank-out", str(bank_path)])
    assert code == 0
    code = main(["--output", str(tmp_path / "b"), "extract",
                 "--adapter", "synthetic", "--root", str(dataset_root),
                 "--splits", "test", "--bank-in", str(bank_path)])
    assert code == 0
    a = (tmp_path / "a-test.emb").read_bytes()
    b = (tmp_path / "b-test.emb").read_bytes()
    assert a == b


def test_embeddings_import_and_export(dataset_root, tmp_path, capsys):
    main(["--output", str(tmp_path / "f"), "extract",
          "--adapter", "synthetic", "--root", str(dataset_root),
          "--splits", "test"])
    code = main(["embeddings", "import",
                 "--adapter", "synthetic", "--root", str(dataset_root),
                 "--values", str(tmp_path / "f-test.emb"),
                 "--ids", str(tmp_path / "f-test.ids")])
    assert code == 0
    assert "all ids resolve" in capsys.readouterr().out

    out_csv = tmp_path / "emb.csv"
    code = main(["--output", str(out_csv), "embeddings", "export",
                 "--values", str(tmp_path / "f-test.emb"),
                 "--ids", str(tmp_path / "f-test.ids")])
    assert code == 0
    header = out_csv.read_text().splitlines()[0]
    assert header.startswith("id,f0,")


def test_benchmark_run_and_reports(dataset_root, tmp_path, capsys):
    config = {
        "dataset": {"adapter": "synthetic", "root": str(dataset_root)},
        "band_sets": {"ALL": None},
        "pipelines": {"native": [],
                      "up": [{"op": "resize", "height": 12, "width": 12}]},
        "extractors": [{"type": "image_statistics"}],
        "k": 3,
        "seeds": [0],
        "output_dir": str(tmp_path / "out"),
    }
    cfg_path = tmp_path / "bench.yaml"
    cfg_path.write_text(yaml.safe_dump(config))

    code = main(["--config", str(cfg_path), "benchmark", "run"])
    assert code == 0
    results_path = tmp_path / "out" / "results.jsonl"
    assert results_path.exists()
    assert "2 cells ok" in capsys.readouterr().out

    code = main(["report", "table", "--results", str(results_path),
                 "--format", "markdown"])
    assert code == 0
    out = capsys.readouterr().out
    assert "| Dataset |" in out and "oa" in out

    code = main(["report", "delta", "--results", str(results_path),
                 "--from", "native", "--to", "up"])
    assert code == 0
    assert "oa" in capsys.readouterr().out


def test_benchmark_run_bad_config(tmp_path):
    cfg_path = tmp_path / "bad.yaml"
    cfg_path.write_text(yaml.safe_dump({"nonsense": 1}))
    assert main(["--config", str(cfg_path), "benchmark", "run"]) == 2


def test_benchmark_run_failing_cells_exit_code(dataset_root, tmp_path, capsys):
    config = {
        "dataset": {"adapter": "synthetic", "root": str(dataset_root)},
        "band_sets": {"ALL": None},
        "pipelines": {"native": []},
        "extractors": [{"type": "rcf_random", "features": 8,
                        "kernel_size": 11}],  # larger than the 8x8 images
        "seeds": [0],
        "output_dir": str(tmp_path / "out"),
    }
    cfg_path = tmp_path / "bench.yaml"
    cfg_path.write_text(yaml.safe_dump(config))
    assert main(["--config", str(cfg_path), "benchmark", "run"]) == 4


def test_report_table_missing_results(tmp_path):
    assert main(["report", "table", "--results", str(tmp_path / "none.jsonl")]) == 3
