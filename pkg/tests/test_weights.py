from __future__ import annotations

import hashlib
import pickle
from pathlib import Path
from typing import List

import numpy as np
import pytest
import requests
import torch

from wbcbench.config import ConfigurationError
from wbcbench.weights import (
    WeightsFetcher,
    convert_detectron_gn,
    detectron_to_torchvision_name,
    load_gn_state_dict,
)

from conftest import make_config

URL = "https://example.test/weights/R-50-GN.pkl"


class FakeResponse:
    def __init__(self, status_code: int, body: bytes = b""):
        self.status_code = status_code
        self._body = body

    def raise_for_status(self) -> None:
        if self.status_code >= 400:
            raise requests.HTTPError(response=self)

    def iter_content(self, chunk_size: int = 1):
        for i in range(0, len(self._body), chunk_size):
            yield self._body[i : i + chunk_size]


class FakeSession:
    def __init__(self, responses: List[object]):
        self._responses = responses
        self.calls = 0

    def get(self, url, stream=False, timeout=None):
        resp = self._responses[self.calls]
        self.calls += 1
        if isinstance(resp, Exception):
            raise resp
        return resp


def test_fetch_retries_then_caches(tmp_path: Path) -> None:
    body = b"weights" * 100
    session = FakeSession([FakeResponse(503), requests.ConnectionError("reset"), FakeResponse(200, body)])
    fetcher = WeightsFetcher(make_config(tmp_path, max_retries=2), session=session)
    path = fetcher.fetch(URL, hashlib.sha256(body).hexdigest())
    assert path.read_bytes() == body
    assert path == tmp_path / "weights" / "R-50-GN.pkl"
    assert session.calls == 3

    # second call is served from the cache
    assert fetcher.fetch(URL) == path
    assert session.calls == 3


def test_fetch_gives_up_after_max_retries(tmp_path: Path) -> None:
    session = FakeSession([FakeResponse(500), FakeResponse(500)])
    fetcher = WeightsFetcher(make_config(tmp_path, max_retries=1), session=session)
    with pytest.raises(ConfigurationError, match="Download it manually"):
        fetcher.fetch(URL)
    assert not (tmp_path / "weights" / "R-50-GN.pkl.part").exists()


def test_fetch_rejects_sha_mismatch(tmp_path: Path) -> None:
    fetcher = WeightsFetcher(make_config(tmp_path), session=FakeSession([FakeResponse(200, b"abc")]))
    with pytest.raises(ConfigurationError, match="sha256 mismatch"):
        fetcher.fetch(URL, "0" * 64)
    assert not fetcher.cached_path(URL).exists()


def test_cached_file_must_match_pinned_sha(tmp_path: Path) -> None:
    fetcher = WeightsFetcher(make_config(tmp_path), session=FakeSession([]))
    target = fetcher.cached_path(URL)
    target.parent.mkdir(parents=True)
    target.write_bytes(b"stale")
    with pytest.raises(ConfigurationError, match="do not match"):
        fetcher.fetch(URL, "f" * 64)


def test_detectron_blob_names() -> None:
    assert detectron_to_torchvision_name("conv1_w") == "conv1.weight"
    assert detectron_to_torchvision_name("conv1_gn_s") == "bn1.weight"
    assert detectron_to_torchvision_name("res2_0_branch1_w") == "layer1.0.downsample.0.weight"
    assert detectron_to_torchvision_name("res2_0_branch1_gn_b") == "layer1.0.downsample.1.bias"
    assert detectron_to_torchvision_name("res5_2_branch2c_gn_s") == "layer4.2.bn3.weight"
    assert detectron_to_torchvision_name("res3_1_branch2b_w") == "layer2.1.conv2.weight"
    assert detectron_to_torchvision_name("pred_w") is None


def test_pickled_detectron_checkpoint_loads(tmp_path: Path) -> None:
    conv1 = np.zeros((64, 3, 7, 7), dtype=np.float32)
    conv1[:, 0] = 1.0  # blue channel in BGR order
    blobs = {"conv1_w": conv1, "conv1_gn_s": np.ones(64, dtype=np.float32), "pred_b": np.zeros(1000)}
    path = tmp_path / "gn.pkl"
    with path.open("wb") as fh:
        pickle.dump({"blobs": blobs}, fh)

    state = load_gn_state_dict(path)
    assert set(state) == {"conv1.weight", "bn1.weight"}
    weight = state["conv1.weight"]
    # BGR -> RGB moves the blue filter to channel 2, scaled by std * 255
    assert torch.count_nonzero(weight[:, :2]) == 0
    assert weight[0, 2, 0, 0].item() == pytest.approx(0.225 * 255.0, rel=1e-6)
    assert convert_detectron_gn(blobs)["bn1.weight"].dtype == torch.float32


def test_missing_gn_checkpoint_names_the_fetch_command(tmp_path: Path) -> None:
    with pytest.raises(ConfigurationError, match="--fetch-gn-weights"):
        load_gn_state_dict(tmp_path / "absent.pkl")
