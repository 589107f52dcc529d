from __future__ import annotations

import json
from pathlib import Path

from wbcbench.classes import DatasetTag
from wbcbench.storage import ResultsStore, build_provenance, canonical_json_bytes, config_hash, write_json

from test_evaluator import make_run


def test_canonical_json_ignores_key_order() -> None:
    assert canonical_json_bytes({"b": 1, "a": [1, 2]}) == b'{"a":[1,2],"b":1}'
    assert config_hash({"b": 1, "a": 2}) == config_hash({"a": 2, "b": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_write_json_is_sorted_and_leaves_no_temp_files(tmp_path: Path) -> None:
    path = write_json(tmp_path / "nested" / "out.json", {"z": 1, "a": 2})
    assert path.read_text().startswith('{\n  "a": 2')
    assert [p.name for p in path.parent.iterdir()] == ["out.json"]


def test_store_round_trip_and_layout(tmp_path: Path) -> None:
    store = ResultsStore(tmp_path)
    run = make_run("a'", 2, {DatasetTag.LISC: 30.0})
    path = store.save(run, provenance={"seed": 2})
    assert path == tmp_path / "a_prime" / "seed2.json"
    assert store.has("a'", 2) and not store.has("a'", 3)
    assert store.load("a'", 2) == run
    assert json.loads(store.provenance_path("a'", 2).read_text()) == {"seed": 2}


def test_load_all_groups_by_key_and_sorts_seeds(tmp_path: Path) -> None:
    store = ResultsStore(tmp_path)
    for seed in (10, 2, 1):
        store.save(make_run("a", seed, {DatasetTag.LISC: 20.0}), provenance={})
    store.save(make_run("desk-gn", 0, {DatasetTag.SYNTH_SHIFTED: 80.0}))
    (tmp_path / "notes").mkdir()

    results = store.load_all()
    assert sorted(results) == ["a", "desk-gn"]
    assert [r.seed for r in results["a"]] == [1, 2, 10]
    assert [r.seed for r in store.load_variant("a")] == [1, 2, 10]
    assert store.load_variant("b") == []
    assert ResultsStore(tmp_path / "absent").load_all() == {}


def test_identical_runs_serialize_identically(tmp_path: Path) -> None:
    run = make_run("i", 0, {DatasetTag.LISC: 70.0})
    slow = run.model_copy(update={"wall_time": 120.0})
    a = ResultsStore(tmp_path / "a").save(run)
    b = ResultsStore(tmp_path / "b").save(slow)
    assert a.read_bytes() == b.read_bytes()


def test_provenance_carries_hash_and_environment() -> None:
    prov = build_provenance({"tier": "DESK"}, ["train", "--variant", "a"], "cpu", True, seed=3)
    assert prov["config_hash"] == config_hash({"tier": "DESK"})
    assert prov["argv"] == ["train", "--variant", "a"]
    assert prov["environment"]["device"] == "cpu"
    assert prov["seed"] == 3
