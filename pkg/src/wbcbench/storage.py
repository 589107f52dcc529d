"""Per-seed results store and run provenance.

Layout under the output directory::

    <variant>/seed<k>.json             RunResult (deterministic bytes)
    <variant>/seed<k>.ckpt             model checkpoint
    <variant>/seed<k>.provenance.json  wall time, versions, argv

Every seed owns its own files, so concurrent writers never collide and a
crashed sweep resumes from whatever seeds completed.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
import subprocess
import sys
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
import torchvision

from .modelzoo import variant_slug
from .trainer import RunResult

logger = logging.getLogger(__name__)

RESULT_GLOB = "seed*.json"


def canonical_json_bytes(payload: Any) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("utf-8")


def config_hash(payload: Any) -> str:
    return hashlib.sha256(canonical_json_bytes(payload)).hexdigest()


def write_json(path: Path, payload: Any) -> Path:
    """Write pretty, key-sorted JSON atomically."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(json.dumps(payload, ensure_ascii=True, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


def package_version() -> str:
    try:
        return metadata.version("wbcbench")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def git_revision(cwd: Optional[Path] = None) -> Optional[str]:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=cwd or Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
            check=True,
        )
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def environment_fingerprint(device: str, deterministic: bool) -> Dict[str, Any]:
    return {
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "torch": torch.__version__,
        "torchvision": torchvision.__version__,
        "numpy": np.__version__,
        "cuda": torch.version.cuda,
        "device": device,
        "deterministic": deterministic,
    }


def build_provenance(
    config: Dict[str, Any],
    argv: Optional[Sequence[str]],
    device: str,
    deterministic: bool,
    **extra: Any,
) -> Dict[str, Any]:
    return {
        "config": config,
        "config_hash": config_hash(config),
        "version": package_version(),
        "git_revision": git_revision(),
        "environment": environment_fingerprint(device, deterministic),
        "argv": list(argv) if argv is not None else None,
        **extra,
    }


class ResultsStore:
    def __init__(self, root: Path) -> None:
        self.root = Path(root)

    def variant_dir(self, key: str) -> Path:
        return self.root / variant_slug(key)

    def result_path(self, key: str, seed: int) -> Path:
        return self.variant_dir(key) / f"seed{seed}.json"

    def checkpoint_path(self, key: str, seed: int) -> Path:
        return self.variant_dir(key) / f"seed{seed}.ckpt"

    def provenance_path(self, key: str, seed: int) -> Path:
        return self.variant_dir(key) / f"seed{seed}.provenance.json"

    def has(self, key: str, seed: int) -> bool:
        return self.result_path(key, seed).exists()

    def save(self, result: RunResult, provenance: Optional[Dict[str, Any]] = None) -> Path:
        key = result.spec.key
        path = write_json(self.result_path(key, result.seed), result.model_dump(mode="json"))
        if provenance is not None:
            write_json(self.provenance_path(key, result.seed), provenance)
        logger.info(f"Stored {key} seed {result.seed} -> {path}")
        return path

    def load(self, key: str, seed: int) -> RunResult:
        return RunResult.model_validate_json(self.result_path(key, seed).read_text(encoding="utf-8"))

    def _result_files(self, directory: Path) -> List[Path]:
        files = [p for p in directory.glob(RESULT_GLOB) if not p.name.endswith(".provenance.json")]
        return sorted(files, key=lambda p: int(p.stem.removeprefix("seed")))

    def load_variant(self, key: str) -> List[RunResult]:
        directory = self.variant_dir(key)
        if not directory.is_dir():
            return []
        return [RunResult.model_validate_json(p.read_text(encoding="utf-8")) for p in self._result_files(directory)]

    def load_all(self) -> Dict[str, List[RunResult]]:
        results: Dict[str, List[RunResult]] = {}
        if not self.root.is_dir():
            return results
        for directory in sorted(p for p in self.root.iterdir() if p.is_dir()):
            for path in self._result_files(directory):
                run = RunResult.model_validate_json(path.read_text(encoding="utf-8"))
                results.setdefault(run.spec.key, []).append(run)
        return results
