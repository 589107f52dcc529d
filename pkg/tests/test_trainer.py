from __future__ import annotations

import math
from pathlib import Path

import pytest
import torch

from wbcbench.classes import WbcClass
from wbcbench.datasets import DatasetManifest, ManifestError
from wbcbench.modelzoo import DESK_SPECS, build_model
from wbcbench.storage import ResultsStore
from wbcbench.synthetic import SynthConfig, ensure_synthetic_pair
from wbcbench.trainer import (
    RunResult,
    TrainConfig,
    _class_weights,
    fit,
    frozen_state_checksum,
    run_benchmark,
    seed_everything,
    train,
)

TINY = TrainConfig.desk(warmup_epochs=1, decay_epochs=1, batch_size=8)


@pytest.fixture
def synth(tmp_path: Path):
    return ensure_synthetic_pair(SynthConfig(root=tmp_path / "synth", n_per_class_train=4, n_per_class_test=2))


def test_same_seed_same_result(synth, env) -> None:
    train_m, source_m, shifted_m = synth
    runs = [
        train(DESK_SPECS["desk-bn"], train_m, TINY, 0, [source_m, shifted_m], env=env, show_progress=False)
        for _ in range(2)
    ]
    assert runs[0].model_dump_json() == runs[1].model_dump_json()
    assert len(runs[0].epoch_trace) == TINY.total_epochs
    assert set(runs[0].eval_results) == {"SYNTH_SOURCE", "SYNTH_SHIFTED"}
    assert runs[0].eval_results["SYNTH_SOURCE"].n == 10


def test_epoch_trace_records_epoch_start_lr(synth, env) -> None:
    train_m, source_m, _ = synth
    outcome = fit(DESK_SPECS["desk-gn"], train_m, TINY, 1, env=env, show_progress=False)
    assert [r.epoch for r in outcome.epoch_trace] == [1, 2]
    assert abs(outcome.epoch_trace[0].train_loss - math.log(5)) < 0.5
    assert outcome.epoch_trace[0].lr == 0.0
    assert outcome.epoch_trace[1].lr == pytest.approx(TINY.peak_lr)
    assert outcome.frozen_checksum is None


def test_frozen_bn_run_records_checksum(synth, env) -> None:
    train_m, source_m, _ = synth
    result = train(DESK_SPECS["desk-frozen"], train_m, TINY, 0, [source_m], env=env, show_progress=False)
    assert result.frozen_checksum is not None


def test_frozen_bn_state_survives_many_optimizer_steps(synth, env) -> None:
    spec = DESK_SPECS["desk-frozen"]
    cfg = TrainConfig.desk(warmup_epochs=2, decay_epochs=4, batch_size=8)
    seed_everything(3)
    initial = build_model(spec, env)
    outcome = fit(spec, synth[0], cfg, 3, env=env, show_progress=False)
    assert len(outcome.epoch_trace) == 6
    assert outcome.frozen_checksum == frozen_state_checksum(initial)
    trained = dict(outcome.model.named_parameters())
    moved = [n for n, p in initial.named_parameters() if p.requires_grad and not torch.equal(p, trained[n])]
    assert moved


def test_train_needs_a_test_set(synth, env) -> None:
    with pytest.raises(ValueError):
        train(DESK_SPECS["desk-bn"], synth[0], TINY, 0, [], env=env, show_progress=False)


def test_empty_training_manifest_is_rejected(synth, env) -> None:
    empty = DatasetManifest.from_records(synth[0].root, [])
    with pytest.raises(ManifestError):
        fit(DESK_SPECS["desk-bn"], empty, TINY, 0, env=env, show_progress=False)


def test_class_weights_need_every_class(synth) -> None:
    train_m = synth[0]
    weights = _class_weights(train_m)
    assert torch.allclose(weights, torch.ones(5))
    partial = DatasetManifest.from_records(
        train_m.root, [r for r in train_m.records if r.label is not WbcClass.BASOPHIL]
    )
    with pytest.raises(ManifestError, match="BASOPHIL"):
        _class_weights(partial)


def test_run_benchmark_resumes_and_rejects_duplicates(synth, env, tmp_path: Path) -> None:
    train_m, source_m, _ = synth
    store = ResultsStore(tmp_path / "runs")
    spec = DESK_SPECS["desk-bn"]
    with pytest.raises(ValueError, match="duplicate"):
        run_benchmark(spec, [0, 0], TINY, [source_m], train_m, store, env=env, show_progress=False)

    first = run_benchmark(spec, [1], TINY, [source_m], train_m, store, env=env, show_progress=False)
    stored = store.result_path(spec.key, 1).read_bytes()
    assert store.checkpoint_path(spec.key, 1).exists()
    assert store.provenance_path(spec.key, 1).exists()

    both = run_benchmark(spec, [0, 1], TINY, [source_m], train_m, store, env=env, show_progress=False)
    assert [r.seed for r in both] == [0, 1]
    assert store.result_path(spec.key, 1).read_bytes() == stored
    assert both[1].model_dump_json() == first[0].model_dump_json()


def test_run_result_needs_full_trace(synth, env) -> None:
    result = train(DESK_SPECS["desk-bn"], synth[0], TINY, 0, [synth[1]], env=env, show_progress=False)
    payload = result.model_dump(mode="json")
    payload["epoch_trace"] = payload["epoch_trace"][:1]
    with pytest.raises(ValueError):
        RunResult.model_validate(payload)


@pytest.mark.slow
def test_gn_beats_bn_on_shifted_synthetic_domain(tmp_path: Path, env) -> None:
    from wbcbench.checks import synthetic_domain_experiment

    result = synthetic_domain_experiment(tmp_path, seeds=range(3), env=env, show_progress=False)
    assert result.passed, result.detail
