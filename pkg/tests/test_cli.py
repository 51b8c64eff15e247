"""End-to-end commands through the click CLI"""
import csv
import json

import pytest
from click.testing import CliRunner

from deltadiff.ir import load_model
from deltadiff.main import cli
from deltadiff.services import pipeline
from deltadiff.services.corpus import load_corpus, write_corpus

EXPERIMENT = """
models = ["tinynet-A", "tinynet-B"]
dialects = ["native", "dense_as_batch_matmul"]
repeats = 2
warmup = 0
seed = 3

[corpus]
path = "corpus"

[opt]
level = "basic"
"""

FAILED_ID = "tinynet-B.dense_as_batch_matmul.clean.basic.reference"
BASELINE_ID = "tinynet-A.native.clean.basic.reference"


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def experiment(tmp_path, small_corpus):
    write_corpus(tmp_path / "corpus", small_corpus)
    path = tmp_path / "experiment.toml"
    path.write_text(EXPERIMENT)
    return path


def _invoke(runner, *args):
    return runner.invoke(cli, [str(a) for a in args], catch_exceptions=False)


def test_generate_run_analyze(runner, experiment, tmp_path):
    out = tmp_path / "out"
    assert _invoke(runner, "generate", "--config", experiment).exit_code == 0
    manifest = json.loads((out / "variants.json").read_text())
    assert [f["variant_id"] for f in manifest["failed"]] == [FAILED_ID]
    assert len(manifest["variants"]) == 3
    assert load_model(out / "variants" / f"{BASELINE_ID}.json").metadata.passes == ("SimplifyInference",)

    assert _invoke(runner, "run", "--config", experiment, "--debug").exit_code == 0
    records = out / "records" / BASELINE_ID
    assert len((records / "records.jsonl").read_text().splitlines()) == 9
    assert (records / "timings.json").exists()
    assert (records / "traces" / "img000.dtrace").exists()

    assert _invoke(runner, "analyze", "--config", experiment).exit_code == 0
    with open(out / "matrix.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    assert header[0] == "source" and len(header) == 5
    failed_column = header.index(FAILED_ID)
    assert all(row[failed_column] == "FAILED" for row in body)
    baseline_row = next(row for row in body if row[0] == BASELINE_ID)
    assert baseline_row[header.index(BASELINE_ID)] == "0.0000"

    report_dir = out / "reports" / f"{BASELINE_ID}__tinynet-A.dense_as_batch_matmul.clean.basic.reference"
    report = json.loads((report_dir / "report.json").read_text())
    assert report["verdict"] == "GraphStructureDivergence"
    assert (report_dir / "labels_diff.csv").read_text().startswith("image_id,top1_a,top1_b,rbo")
    assert (out / "timing_summary.json").exists()


def test_rerun_writes_identical_records(runner, experiment, tmp_path):
    for out in ("one", "two"):
        _invoke(runner, "generate", "--config", experiment, "--out", tmp_path / out)
        _invoke(runner, "run", "--config", experiment, "--out", tmp_path / out)
    for name in ("variants.json", f"records/{BASELINE_ID}/records.jsonl", f"variants/{BASELINE_ID}.json"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_analyze_selected_pair(runner, experiment, tmp_path):
    _invoke(runner, "generate", "--config", experiment)
    _invoke(runner, "run", "--config", experiment)
    other = "tinynet-B.native.clean.basic.reference"
    result = _invoke(runner, "analyze", "--config", experiment, "--pair", BASELINE_ID, other)
    assert result.exit_code == 0
    reports = list((tmp_path / "out" / "reports").iterdir())
    assert [p.name for p in reports] == [f"{BASELINE_ID}__{other}"]


def test_missing_config_file(runner, tmp_path):
    assert _invoke(runner, "generate", "--config", tmp_path / "nope.toml").exit_code == 2


def test_invalid_config(runner, tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text('models = ["tinynet-A"]\ndialects = ["onnx"]\n')
    assert _invoke(runner, "generate", "--config", path).exit_code == 2


def test_unknown_model_manifest(runner, tmp_path):
    path = tmp_path / "missing.toml"
    path.write_text('models = ["models/absent.json"]\n')
    assert _invoke(runner, "generate", "--config", path).exit_code == 2


def test_analyze_before_run(runner, experiment):
    assert _invoke(runner, "analyze", "--config", experiment).exit_code == 4


def test_run_before_generate(runner, experiment):
    assert _invoke(runner, "run", "--config", experiment).exit_code == 4


def test_bad_corpus_directory(runner, experiment, tmp_path):
    _invoke(runner, "generate", "--config", experiment)
    (tmp_path / "corpus" / "img000.dtns").write_bytes(b"not a tensor")
    assert _invoke(runner, "run", "--config", experiment).exit_code == 3


def test_sweep(runner, experiment, tmp_path):
    assert _invoke(runner, "sweep", "--config", experiment).exit_code == 0
    for name in ("tinynet-A", "tinynet-B"):
        sweep_dir = tmp_path / "out" / "sweep" / name
        assert json.loads((sweep_dir / "pass_sweep.json").read_text())["model"] == name
        assert (sweep_dir / "pass_sweep.csv").read_text().startswith("pass_id,changed,dissimilarity_pct")


def test_assets(runner, tmp_path):
    assert _invoke(runner, "assets", "--out", tmp_path / "assets").exit_code == 0
    for name in ("tinynet-A", "tinynet-B", "tinynet-C"):
        assert load_model(tmp_path / "assets" / "models" / f"{name}.json").metadata.name == name
    assert len(load_corpus(tmp_path / "assets" / "desk")) == 64


def test_demo(runner, tmp_path):
    result = _invoke(runner, "demo", "--out", tmp_path / "cli")
    assert result.exit_code == 0
    assert "divergence gone after repair" in result.output

    again = pipeline.demo(tmp_path / "api")
    assert again.faulty.dissimilarity_pct > 0
    assert again.faulty.verdict.value == "ParameterDivergence"
    assert again.converged
    name = "tinynet-A.source__tinynet-A.converted"
    first = (tmp_path / "cli" / "demo" / "reports" / name / "report.json").read_bytes()
    second = (tmp_path / "api" / "demo" / "reports" / name / "report.json").read_bytes()
    assert first == second


def test_internal_error_exit_code(runner, experiment, mocker):
    mocker.patch.object(pipeline, "generate", side_effect=RuntimeError("boom"))
    result = _invoke(runner, "generate", "--config", experiment)
    assert result.exit_code == 5
    assert "boom" in result.output


def test_demo_takes_seed_and_output_from_config(runner, tmp_path, mocker):
    spy = mocker.spy(pipeline, "demo")
    path = tmp_path / "demo.toml"
    path.write_text('models = ["tinynet-A"]\nseed = 0\n\n[output]\ndir = "from_config"\n')
    assert _invoke(runner, "demo", "--config", path).exit_code == 0
    assert spy.call_args.args == (tmp_path / "from_config", 0)
    name = "tinynet-A.source__tinynet-A.converted"
    assert (tmp_path / "from_config" / "demo" / "reports" / name / "report.json").exists()


def test_demo_with_missing_config(runner, tmp_path):
    assert _invoke(runner, "demo", "--config", tmp_path / "nope.toml").exit_code == 2
