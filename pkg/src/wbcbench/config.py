from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv

load_dotenv()

DEFAULT_WEIGHTS_CACHE = Path.home() / ".cache" / "wbcbench" / "weights"


class ConfigurationError(Exception):
    """Raised for fatal setup problems: missing roots, weights, unwritable outputs."""
    pass


@dataclass(frozen=True)
class Config:
    weights_cache: Path
    raabin_root: Optional[Path]
    lisc_root: Optional[Path]
    synth_cache: Path
    device: str
    num_workers: int
    request_timeout_s: float
    max_retries: int
    backoff_base_s: float
    gn_weights_url: str
    gn_weights_sha256: Optional[str]


def _optional_path(value: Optional[str]) -> Optional[Path]:
    if value is None or not value.strip():
        return None
    return Path(value).expanduser()


def load_config() -> Config:
    return Config(
        weights_cache=Path(
            os.getenv("WBC_WEIGHTS_CACHE", str(DEFAULT_WEIGHTS_CACHE))
        ).expanduser(),
        raabin_root=_optional_path(os.getenv("WBC_RAABIN_ROOT")),
        lisc_root=_optional_path(os.getenv("WBC_LISC_ROOT")),
        synth_cache=Path(os.getenv("WBC_SYNTH_CACHE", "data/synth")).expanduser(),
        device=os.getenv("WBC_DEVICE", "cpu"),
        num_workers=int(os.getenv("WBC_NUM_WORKERS", "0")),
        request_timeout_s=float(os.getenv("WBC_HTTP_TIMEOUT_S", "60")),
        max_retries=int(os.getenv("WBC_HTTP_MAX_RETRIES", "3")),
        backoff_base_s=float(os.getenv("WBC_HTTP_BACKOFF_S", "0.6")),
        gn_weights_url=os.getenv(
            "WBC_GN_WEIGHTS_URL",
            "https://dl.fbaipublicfiles.com/detectron/ImageNetPretrained/47261647/R-50-GN.pkl",
        ),
        gn_weights_sha256=os.getenv("WBC_GN_WEIGHTS_SHA256") or None,
    )


def load_experiment_file(path: Path) -> Dict[str, Any]:
    """Read an ``experiment.json``; a missing file is a configuration error."""
    if not path.exists():
        raise ConfigurationError(f"experiment file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigurationError(f"experiment file {path} is not valid JSON: {err}") from err
    if not isinstance(payload, dict):
        raise ConfigurationError(f"experiment file {path} must hold a JSON object")
    return payload


def ensure_writable_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise ConfigurationError(f"output directory {path} is not writable: {err}") from err
    if not os.access(path, os.W_OK):
        raise ConfigurationError(f"output directory {path} is not writable")
    return path
