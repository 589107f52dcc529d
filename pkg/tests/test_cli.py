from __future__ import annotations

import argparse
import json
from pathlib import Path

import pytest

from wbcbench import cli
from wbcbench.classes import DatasetTag
from wbcbench.cli import (
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_USAGE,
    EXIT_VALIDATION,
    ExperimentConfig,
    main,
    parse_seeds,
)
from wbcbench.storage import ResultsStore
from wbcbench.synthetic import SynthConfig, ensure_synthetic_pair

from test_evaluator import make_run


def _error(capsys) -> dict:
    lines = [line for line in capsys.readouterr().err.splitlines() if line.startswith('{"error"')]
    assert lines, "no error JSON on stderr"
    return json.loads(lines[-1])


@pytest.fixture(autouse=True)
def isolated(tmp_path: Path, monkeypatch) -> None:
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("WBC_WEIGHTS_CACHE", str(tmp_path / "weights"))
    monkeypatch.setenv("WBC_SYNTH_CACHE", str(tmp_path / "synth"))
    monkeypatch.delenv("WBC_RAABIN_ROOT", raising=False)
    monkeypatch.delenv("WBC_LISC_ROOT", raising=False)


def test_parse_seeds() -> None:
    assert parse_seeds("0..9") == list(range(10))
    assert parse_seeds("0,3, 5") == [0, 3, 5]
    assert parse_seeds("4") == [4]
    with pytest.raises(argparse.ArgumentTypeError):
        parse_seeds("5..1")
    with pytest.raises(argparse.ArgumentTypeError):
        parse_seeds("a,b")


def test_experiment_config_validation() -> None:
    assert ExperimentConfig(variants=["A′"]).variants == ["a'"]
    assert ExperimentConfig(variants=["desk-gn"]).specs()[0].key == "desk-gn"
    with pytest.raises(ValueError):
        ExperimentConfig(seeds=[1, 1])
    with pytest.raises(ValueError):
        ExperimentConfig(seeds=[])


def test_missing_subcommand_is_a_usage_error(capsys) -> None:
    with pytest.raises(SystemExit) as excinfo:
        main([])
    assert excinfo.value.code == EXIT_USAGE
    assert _error(capsys)["error"] == "UsageError"


def test_unknown_variant_is_a_validation_error(tmp_path: Path, capsys) -> None:
    code = main(["train", "--variant", "zz", "--out", str(tmp_path / "out")])
    assert code == EXIT_VALIDATION
    assert _error(capsys)["exit_code"] == EXIT_VALIDATION


def test_desk_tier_refuses_uncached_pretrained_weights(tmp_path: Path, capsys) -> None:
    code = main(["train", "--variant", "a", "--tier", "desk", "--out", str(tmp_path / "out")])
    assert code == EXIT_VALIDATION
    error = _error(capsys)
    assert error["error"] == "ConfigurationError"
    assert "not cached for a" in error["message"]


def test_report_on_empty_directory(tmp_path: Path, capsys) -> None:
    (tmp_path / "empty").mkdir()
    code = main(["report", "--in", str(tmp_path / "empty"), "--out", str(tmp_path / "out")])
    assert code == EXIT_VALIDATION
    assert "no run results found" in _error(capsys)["message"]


def test_report_from_stored_results(tmp_path: Path, capsys) -> None:
    store = ResultsStore(tmp_path / "runs")
    for key in ("a", "i"):
        for seed in range(3):
            store.save(make_run(key, seed, {DatasetTag.RAABIN_TEST_A: 98.0, DatasetTag.LISC: 20.0 + 25 * (key == "i") + seed}))

    code = main(["report", "--in", str(tmp_path / "runs"), "--no-figures"])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "46.00±2.48" in out
    for name in ("report.json", "report.csv", "report.txt", "report.schema.json", "provenance.json"):
        assert (tmp_path / "runs" / name).exists()
    provenance = json.loads((tmp_path / "runs" / "provenance.json").read_text())
    assert "report" in provenance


def test_quick_desk_check_passes(tmp_path: Path) -> None:
    out = tmp_path / "desk"
    assert main(["desk-check", "--quick", "--out", str(out)]) == EXIT_OK
    suites = json.loads((out / "desk_check.json").read_text())
    assert {s["name"] for s in suites} >= {"normalization-oracles", "metrics-fidelity", "ci-fidelity"}
    assert all(s["passed"] for s in suites)


def test_vit_is_rejected_at_desk_image_size(tmp_path: Path, capsys) -> None:
    code = main(["train", "--variant", "c", "--tier", "desk", "--out", str(tmp_path / "out")])
    assert code == EXIT_VALIDATION
    error = _error(capsys)
    assert error["error"] == "ConfigurationError"
    assert "needs 224px inputs, got 32px" in error["message"]


@pytest.fixture
def small_desk(tmp_path: Path, monkeypatch) -> list:
    synth_root = tmp_path / "small-synth"
    monkeypatch.setattr(
        cli,
        "_synth_manifests",
        lambda env: ensure_synthetic_pair(SynthConfig(root=synth_root, n_per_class_train=4, n_per_class_test=2)),
    )
    experiment = tmp_path / "experiment.json"
    experiment.write_text(json.dumps({"train": {"warmup_epochs": 1, "decay_epochs": 1, "batch_size": 8}}))
    return ["--tier", "desk", "--config", str(experiment)]


def test_ablate_resumes_without_retraining_stored_seeds(tmp_path: Path, small_desk, capsys) -> None:
    out = tmp_path / "runs"
    args = ["ablate", "--variants", "desk-bn,desk-gn", "--out", str(out), *small_desk]
    assert main([*args, "--seeds", "0"]) == EXIT_OK

    store = ResultsStore(out)
    stored = {key: store.result_path(key, 0) for key in ("desk-bn", "desk-gn")}
    before = {key: (p.read_bytes(), p.stat().st_mtime_ns) for key, p in stored.items()}
    checkpoints = {key: store.checkpoint_path(key, 0).stat().st_mtime_ns for key in stored}

    assert main([*args, "--seeds", "0,1"]) == EXIT_OK
    for key, path in stored.items():
        assert (path.read_bytes(), path.stat().st_mtime_ns) == before[key]
        assert store.checkpoint_path(key, 0).stat().st_mtime_ns == checkpoints[key]
        assert store.has(key, 1)
    assert (out / "report.json").exists()
    assert "\033" not in capsys.readouterr().out


def test_ablate_isolates_a_failing_variant(tmp_path: Path, small_desk, monkeypatch, capsys) -> None:
    real_run_benchmark = cli.run_benchmark

    def flaky(spec, *args, **kwargs):
        if spec.key == "desk-gn":
            raise RuntimeError("loader crashed")
        return real_run_benchmark(spec, *args, **kwargs)

    monkeypatch.setattr(cli, "run_benchmark", flaky)
    out = tmp_path / "runs"
    code = main(["ablate", "--variants", "desk-bn,desk-gn", "--seeds", "0", "--out", str(out), *small_desk])
    assert code == EXIT_RUNTIME
    assert "failed variants: desk-gn" in capsys.readouterr().out
    report = json.loads((out / "report.json").read_text())
    assert "desk-bn" in json.dumps(report)
    assert "desk-gn" not in json.dumps(report["comparison"])
    assert ResultsStore(out).has("desk-bn", 0)
