from __future__ import annotations

import hashlib
import logging
import pickle
import random
import re
import time
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import requests
import torch

from .config import Config, ConfigurationError
from .datasets import IMAGENET_STD

logger = logging.getLogger(__name__)

RETRY_STATUS_CODES = {429, 500, 502, 503, 504}
CHUNK_BYTES = 1 << 20


class WeightsFetcher:
    """Download checkpoints into the local weights cache, with retries."""

    def __init__(self, cfg: Config, session: Optional[requests.Session] = None) -> None:
        self.cfg = cfg
        self.session = session or requests.Session()

    def cached_path(self, url: str) -> Path:
        return self.cfg.weights_cache / url.rstrip("/").rsplit("/", 1)[-1]

    def fetch(self, url: str, sha256: Optional[str] = None) -> Path:
        target = self.cached_path(url)
        if target.exists():
            if sha256 and file_sha256(target) != sha256.lower():
                raise ConfigurationError(
                    f"cached weights {target} do not match pinned sha256 {sha256}; "
                    "delete the file and fetch again"
                )
            return target

        target.parent.mkdir(parents=True, exist_ok=True)
        partial = target.with_suffix(target.suffix + ".part")
        last_err: Optional[Exception] = None

        for attempt in range(self.cfg.max_retries + 1):
            try:
                self._download(url, partial)
                break
            except requests.RequestException as err:
                last_err = err
                if attempt >= self.cfg.max_retries:
                    partial.unlink(missing_ok=True)
                    raise ConfigurationError(
                        f"could not download {url}: {err}. Download it manually into "
                        f"{target.parent} (or set WBC_WEIGHTS_CACHE) and rerun."
                    ) from last_err
                _sleep_backoff(self.cfg.backoff_base_s, attempt)

        digest = file_sha256(partial)
        if sha256 and digest != sha256.lower():
            partial.unlink(missing_ok=True)
            raise ConfigurationError(f"sha256 mismatch for {url}: got {digest}, expected {sha256}")
        partial.replace(target)
        logger.info(f"Downloaded {url} -> {target} (sha256 {digest})")
        return target

    def _download(self, url: str, dest: Path) -> None:
        resp = self.session.get(url, stream=True, timeout=self.cfg.request_timeout_s)
        if resp.status_code in RETRY_STATUS_CODES:
            raise requests.HTTPError(f"retryable status: {resp.status_code}", response=resp)
        resp.raise_for_status()
        with dest.open("wb") as fh:
            for chunk in resp.iter_content(chunk_size=CHUNK_BYTES):
                if chunk:
                    fh.write(chunk)


def _sleep_backoff(base_s: float, attempt: int) -> None:
    # exponential backoff with jitter
    jitter = random.random() * 0.2
    delay = base_s * (2**attempt) + jitter
    time.sleep(delay)


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(CHUNK_BYTES), b""):
            digest.update(block)
    return digest.hexdigest()


def use_weights_cache(cfg: Config) -> None:
    """Point torch.hub (and with it torchvision's weight downloads) at the cache."""
    cfg.weights_cache.mkdir(parents=True, exist_ok=True)
    torch.hub.set_dir(str(cfg.weights_cache / "hub"))


# --- GN ResNet50 checkpoint conversion ---
#
# The published GN ImageNet weights use Detectron blob names, e.g.
#   conv1_w, conv1_gn_s, conv1_gn_b
#   res2_0_branch2a_w, res2_0_branch2a_gn_s, res2_0_branch1_w, res2_0_branch1_gn_b
# and expect BGR input in 0-255 with only mean subtraction.

_BRANCH2 = {"a": "1", "b": "2", "c": "3"}
_BLOB = re.compile(r"^res(\d)_(\d+)_branch(1|2[abc])_(w|gn_s|gn_b)$")


def detectron_to_torchvision_name(blob: str) -> Optional[str]:
    if blob == "conv1_w":
        return "conv1.weight"
    if blob == "conv1_gn_s":
        return "bn1.weight"
    if blob == "conv1_gn_b":
        return "bn1.bias"
    match = _BLOB.match(blob)
    if match is None:
        return None
    stage, block, branch, kind = match.groups()
    prefix = f"layer{int(stage) - 1}.{int(block)}"
    if branch == "1":
        module = "downsample.0" if kind == "w" else "downsample.1"
    else:
        idx = _BRANCH2[branch[1]]
        module = f"conv{idx}" if kind == "w" else f"bn{idx}"
    suffix = {"w": "weight", "gn_s": "weight", "gn_b": "bias"}[kind]
    return f"{prefix}.{module}.{suffix}"


def convert_detectron_gn(blobs: Dict[str, Any]) -> Dict[str, torch.Tensor]:
    state: Dict[str, torch.Tensor] = {}
    for blob, value in blobs.items():
        name = detectron_to_torchvision_name(blob)
        if name is None:
            continue
        state[name] = torch.from_numpy(np.ascontiguousarray(value, dtype=np.float32))

    # BGR 0-255 -> RGB standardized input: x_caffe ~= x_std * std * 255.
    w = state["conv1.weight"].flip(1)
    scale = torch.tensor(IMAGENET_STD, dtype=w.dtype).view(1, 3, 1, 1) * 255.0
    state["conv1.weight"] = w * scale
    return state


def load_gn_state_dict(path: Path) -> Dict[str, torch.Tensor]:
    """Load a GN ResNet50 checkpoint as a torchvision-named state dict."""
    if not path.exists():
        raise ConfigurationError(
            f"GN-pretrained ResNet50 weights not found at {path}. Fetch them with "
            "`wbcbench prepare --fetch-gn-weights` or place the file there manually."
        )
    if path.suffix == ".pkl":
        with path.open("rb") as fh:
            payload = pickle.load(fh, encoding="latin1")
        blobs = payload.get("blobs", payload)
        state = convert_detectron_gn(blobs)
    else:
        payload = torch.load(path, map_location="cpu")
        state = payload.get("state_dict", payload)
    logger.info(f"Loaded {len(state)} GN tensors from {path}")
    return state


