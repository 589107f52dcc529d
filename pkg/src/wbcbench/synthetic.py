"""Procedural two-domain WBC surrogate for desk-scale experiments.

Five nucleus shapes stand in for the five classes. The shifted domain applies
a global stain-like color transform (per-channel gain and bias plus a
background tint) to the held-out images, mimicking the coloring difference
between two labs.
"""
from __future__ import annotations

import json
import logging
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np
from PIL import Image
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import cross_val_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .classes import DatasetTag, WbcClass
from .datasets import DatasetManifest, ImageRecord, read_manifest, write_manifest

logger = logging.getLogger(__name__)

Vec3 = Tuple[float, float, float]

BACKGROUND: Vec3 = (0.93, 0.86, 0.88)
CYTOPLASM: Vec3 = (0.82, 0.72, 0.86)
NUCLEUS: Vec3 = (0.42, 0.24, 0.58)


@dataclass(frozen=True)
class ShiftParams:
    """Offsets defining the shifted domain; all zeros is the identity."""

    channel_gain: Vec3 = (-0.30, -0.15, 0.05)
    channel_bias: Vec3 = (0.12, 0.20, -0.04)
    background_tint: Vec3 = (-0.12, 0.04, 0.10)

    @property
    def is_zero(self) -> bool:
        return not any(self.channel_gain + self.channel_bias + self.background_tint)


@dataclass(frozen=True)
class SynthConfig:
    root: Path
    n_per_class_train: int = 200
    n_per_class_test: int = 100
    image_size: int = 32
    shift_params: ShiftParams = field(default_factory=ShiftParams)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_per_class_train <= 0 or self.n_per_class_test <= 0:
            raise ValueError("synthetic counts must be positive")
        if self.image_size < 16:
            raise ValueError("image_size must be at least 16 pixels")


def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    coords = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(coords, coords, indexing="xy")


def _disk(xx: np.ndarray, yy: np.ndarray, cx: float, cy: float, r: float) -> np.ndarray:
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def _nucleus_mask(
    wbc: WbcClass, xx: np.ndarray, yy: np.ndarray, cx: float, cy: float, r: float, angle: float
) -> np.ndarray:
    if wbc is WbcClass.LYMPHOCYTE:
        return _disk(xx, yy, cx, cy, 0.75 * r)
    if wbc is WbcClass.MONOCYTE:
        return _disk(xx, yy, cx, cy, 0.8 * r) & ~_disk(xx, yy, cx, cy, 0.45 * r)
    if wbc is WbcClass.NEUTROPHIL:
        mask = np.zeros_like(xx, dtype=bool)
        for k in range(3):
            a = angle + k * 2.0 * np.pi / 3.0
            mask |= _disk(xx, yy, cx + 0.45 * r * np.cos(a), cy + 0.45 * r * np.sin(a), 0.28 * r)
        return mask
    if wbc is WbcClass.EOSINOPHIL:
        dx, dy = 0.4 * r * np.cos(angle), 0.4 * r * np.sin(angle)
        return _disk(xx, yy, cx + dx, cy + dy, 0.35 * r) | _disk(xx, yy, cx - dx, cy - dy, 0.35 * r)
    # basophil: square nucleus, rotated
    u = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
    v = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
    return (np.abs(u) <= 0.5 * r) & (np.abs(v) <= 0.5 * r)


def render_cell(wbc: WbcClass, size: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Render one cell; returns (H x W x 3 image in [0, 1], background mask)."""
    xx, yy = _grid(size)
    r = size * 0.36 * rng.uniform(0.85, 1.15)
    cx = size / 2 + rng.uniform(-0.08, 0.08) * size
    cy = size / 2 + rng.uniform(-0.08, 0.08) * size
    angle = rng.uniform(0.0, 2.0 * np.pi)

    cell = _disk(xx, yy, cx, cy, r)
    nucleus = _nucleus_mask(wbc, xx, yy, cx, cy, r, angle) & cell

    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = BACKGROUND
    img[cell] = CYTOPLASM
    img[nucleus] = NUCLEUS
    img *= rng.uniform(0.97, 1.03)
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0), ~cell


def apply_shift(img: np.ndarray, background: np.ndarray, shift: ShiftParams) -> np.ndarray:
    gain = 1.0 + np.asarray(shift.channel_gain)
    out = img * gain + np.asarray(shift.channel_bias)
    out = out + background[..., None] * np.asarray(shift.background_tint)
    return np.clip(out, 0.0, 1.0)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(img * 255.0).astype(np.uint8)


def _save(img: np.ndarray, root: Path, rel: str) -> None:
    path = root / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(img)).save(path, format="PNG")


def make_synthetic_domain_pair(
    cfg: SynthConfig,
) -> Tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Render train / source-test / shifted-test manifests under ``cfg.root``.

    Shifted test images are the source test images passed through
    :func:`apply_shift`, so a zero shift reproduces them pixel for pixel.
    """
    root = Path(cfg.root)
    rng = np.random.default_rng(cfg.seed)
    train: List[ImageRecord] = []
    source: List[ImageRecord] = []
    shifted: List[ImageRecord] = []

    for wbc in WbcClass:
        for i in range(cfg.n_per_class_train):
            img, _ = render_cell(wbc, cfg.image_size, rng)
            rel = f"train/{wbc.name.lower()}/{i:05d}.png"
            _save(img, root, rel)
            train.append(ImageRecord(rel, wbc, DatasetTag.SYNTH_SOURCE))
        for i in range(cfg.n_per_class_test):
            img, background = render_cell(wbc, cfg.image_size, rng)
            rel = f"test_source/{wbc.name.lower()}/{i:05d}.png"
            _save(img, root, rel)
            source.append(ImageRecord(rel, wbc, DatasetTag.SYNTH_SOURCE))
            rel = f"test_shifted/{wbc.name.lower()}/{i:05d}.png"
            _save(apply_shift(img, background, cfg.shift_params), root, rel)
            shifted.append(ImageRecord(rel, wbc, DatasetTag.SYNTH_SHIFTED))

    logger.info(
        f"synthetic pair under {root}: {len(train)} train, {len(source)} source test, "
        f"{len(shifted)} shifted test"
    )
    return (
        DatasetManifest.from_records(root, train),
        DatasetManifest.from_records(root, source),
        DatasetManifest.from_records(root, shifted),
    )


def mean_colors(manifest: DatasetManifest) -> np.ndarray:
    rows = []
    for record in manifest.records:
        with Image.open(manifest.absolute(record)) as img:
            rows.append(np.asarray(img.convert("RGB"), dtype=np.float64).mean(axis=(0, 1)) / 255.0)
    return np.asarray(rows)


def domain_probe_accuracy(
    source: DatasetManifest, shifted: DatasetManifest, seed: int = 0
) -> float:
    """Cross-validated accuracy of a linear probe telling the domains apart by mean color."""
    x = np.concatenate([mean_colors(source), mean_colors(shifted)])
    y = np.concatenate([np.zeros(len(source)), np.ones(len(shifted))])
    probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=1000, random_state=seed))
    return float(cross_val_score(probe, x, y, cv=5).mean())


SYNTH_SPLITS = ("train", "test_source", "test_shifted")


def ensure_synthetic_pair(
    cfg: SynthConfig,
) -> Tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Reuse the rendered pair under ``cfg.root`` if it was made with the same settings."""
    root = Path(cfg.root)
    stamp = root / "synth.json"
    wanted = json.loads(json.dumps({k: v for k, v in asdict(cfg).items() if k != "root"}))
    paths = [root / f"{name}.csv" for name in SYNTH_SPLITS]
    if stamp.exists() and all(p.exists() for p in paths):
        if json.loads(stamp.read_text()) == wanted:
            logger.info(f"reusing synthetic pair under {root}")
            train, source, shifted = (read_manifest(p, root=root) for p in paths)
            return train, source, shifted

    for name in SYNTH_SPLITS:
        shutil.rmtree(root / name, ignore_errors=True)
    manifests = make_synthetic_domain_pair(cfg)
    for manifest, path in zip(manifests, paths):
        write_manifest(manifest, path)
    stamp.write_text(json.dumps(wanted, indent=2, sort_keys=True))
    return manifests
