from __future__ import annotations

import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from wbcbench.config import Config  # noqa: E402


def pytest_addoption(parser) -> None:
    parser.addoption("--run-slow", action="store_true", default=False, help="run tests that train for minutes")


def pytest_configure(config) -> None:
    config.addinivalue_line("markers", "slow: trains several models; enable with --run-slow")


def pytest_collection_modifyitems(config, items) -> None:
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def make_config(tmp_path: Path, **overrides) -> Config:
    values = dict(
        weights_cache=tmp_path / "weights",
        raabin_root=None,
        lisc_root=None,
        synth_cache=tmp_path / "synth",
        device="cpu",
        num_workers=0,
        request_timeout_s=1,
        max_retries=0,
        backoff_base_s=0.01,
        gn_weights_url="https://example.test/weights/R-50-GN.pkl",
        gn_weights_sha256=None,
    )
    values.update(overrides)
    return Config(**values)


@pytest.fixture
def env(tmp_path: Path) -> Config:
    return make_config(tmp_path)
