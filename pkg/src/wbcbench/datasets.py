"""Dataset ingestion, manifests and preprocessing.

A :class:`DatasetManifest` is the unit every training and evaluation step
consumes. Manifests are built by scanning the published RaabinWBC and LISC
directory layouts (or by the synthetic renderer in :mod:`wbcbench.synthetic`)
and are persisted as ``path,label,dataset`` CSV files.
"""
from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from torch.utils.data import Dataset

from .classes import EXPECTED_COUNTS, DatasetTag, RaabinSplit, WbcClass
from .config import ConfigurationError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff"}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

RAABIN_SPLIT_DIRS: Dict[RaabinSplit, Tuple[str, ...]] = {
    RaabinSplit.TRAIN: ("Train", "train", "TRAIN"),
    RaabinSplit.TEST_A: ("TestA", "Test-A", "Test_A", "test_a", "testA"),
    RaabinSplit.TEST_B: ("TestB", "Test-B", "Test_B", "test_b", "testB"),
}

# Folder-name prefixes as they appear in the RaabinWBC and LISC releases
# ("Basophil", "Baso", "eosi", "lymp", "mono", "neut", ...).
_CLASS_PREFIXES: Tuple[Tuple[str, WbcClass], ...] = (
    ("lym", WbcClass.LYMPHOCYTE),
    ("mon", WbcClass.MONOCYTE),
    ("neu", WbcClass.NEUTROPHIL),
    ("eos", WbcClass.EOSINOPHIL),
    ("bas", WbcClass.BASOPHIL),
)


class ManifestError(Exception):
    """Raised when a manifest cannot satisfy a request (empty, too few samples)."""
    pass


class RecordDecodeError(Exception):
    def __init__(self, path: Path, reason: str) -> None:
        super().__init__(f"cannot decode image {path}: {reason}")
        self.path = path


@dataclass(frozen=True)
class ImageRecord:
    path: str
    label: WbcClass
    dataset: DatasetTag


@dataclass
class ScanReport:
    """Warnings collected while scanning a dataset root, persisted as JSON."""

    dataset: DatasetTag
    missing_classes: List[str] = field(default_factory=list)
    count_mismatches: Dict[str, Dict[str, int]] = field(default_factory=dict)
    skipped: List[Dict[str, object]] = field(default_factory=list)

    @property
    def has_warnings(self) -> bool:
        return bool(self.missing_classes or self.count_mismatches or self.skipped)

    def to_dict(self) -> Dict[str, object]:
        return {
            "dataset": self.dataset.value,
            "missing_classes": list(self.missing_classes),
            "count_mismatches": self.count_mismatches,
            "skipped": list(self.skipped),
        }


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    records: Tuple[ImageRecord, ...]
    class_counts: Dict[WbcClass, int]
    report: Optional[ScanReport] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        histogram = _histogram(r.label for r in self.records)
        if dict(self.class_counts) != histogram:
            raise ValueError("class_counts does not match the record labels")

    @classmethod
    def from_records(
        cls,
        root: Path,
        records: Iterable[ImageRecord],
        report: Optional[ScanReport] = None,
    ) -> "DatasetManifest":
        ordered = tuple(sorted(records, key=lambda r: r.path))
        return cls(
            root=Path(root),
            records=ordered,
            class_counts=_histogram(r.label for r in ordered),
            report=report,
        )

    def __len__(self) -> int:
        return len(self.records)

    @property
    def datasets(self) -> List[DatasetTag]:
        return sorted({r.dataset for r in self.records}, key=lambda t: t.value)

    @property
    def tag(self) -> DatasetTag:
        tags = self.datasets
        if len(tags) != 1:
            raise ManifestError(f"manifest mixes datasets: {[t.value for t in tags]}")
        return tags[0]

    def absolute(self, record: ImageRecord) -> Path:
        return self.root / record.path


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: int = 224
    train_augment: bool = True
    channel_mean: Tuple[float, float, float] = IMAGENET_MEAN
    channel_std: Tuple[float, float, float] = IMAGENET_STD
    # Optional centered crop (fraction of the short side) applied before resizing.
    center_crop_fraction: Optional[float] = None

    def __post_init__(self) -> None:
        if self.target_size <= 0:
            raise ValueError("target_size must be positive")
        if len(self.channel_mean) != 3 or len(self.channel_std) != 3:
            raise ValueError("channel_mean and channel_std need three entries")
        if any(s <= 0 for s in self.channel_std):
            raise ValueError("channel_std must be strictly positive")
        if self.center_crop_fraction is not None and not 0 < self.center_crop_fraction <= 1:
            raise ValueError("center_crop_fraction must lie in (0, 1]")


def _histogram(labels: Iterable[WbcClass]) -> Dict[WbcClass, int]:
    counter = Counter(labels)
    return {c: counter.get(c, 0) for c in WbcClass}


def _match_class(name: str) -> Optional[WbcClass]:
    lowered = name.strip().lower()
    for prefix, wbc in _CLASS_PREFIXES:
        if lowered.startswith(prefix):
            return wbc
    return None


def _iter_images(directory: Path) -> Iterable[Path]:
    for path in sorted(directory.iterdir()):
        if path.is_file() and path.suffix.lower() in IMAGE_SUFFIXES:
            yield path


def _check_counts(
    tag: DatasetTag, counts: Dict[WbcClass, int], report: ScanReport
) -> None:
    expected = EXPECTED_COUNTS.get(tag)
    if expected is None:
        return
    for wbc in WbcClass:
        if counts[wbc] != expected[wbc]:
            report.count_mismatches[wbc.name] = {
                "observed": counts[wbc],
                "expected": expected[wbc],
            }
    if report.count_mismatches:
        rows = ", ".join(
            f"{name}: {v['observed']} vs {v['expected']}"
            for name, v in report.count_mismatches.items()
        )
        logger.warning(f"{tag.value}: class counts differ from the published table ({rows})")


def _check_coverage(tag: DatasetTag, counts: Dict[WbcClass, int], report: ScanReport) -> None:
    missing = [wbc.name for wbc in WbcClass if counts[wbc] == 0]
    if missing:
        report.missing_classes = missing
        logger.warning(f"{tag.value}: no images for classes {', '.join(missing)}")


def scan_raabin(root: Path, split: RaabinSplit) -> DatasetManifest:
    """Scan one RaabinWBC split laid out as ``<root>/<Split>/<Class>/<image>``."""
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"RaabinWBC root does not exist: {root}")

    split_dir = next(
        (root / name for name in RAABIN_SPLIT_DIRS[split] if (root / name).is_dir()),
        None,
    )
    if split_dir is None:
        raise ConfigurationError(
            f"RaabinWBC split {split.value} not found under {root} "
            f"(looked for {', '.join(RAABIN_SPLIT_DIRS[split])})"
        )

    tag = split.tag
    report = ScanReport(dataset=tag)
    records: List[ImageRecord] = []
    for class_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        wbc = _match_class(class_dir.name)
        if wbc is None:
            report.skipped.append({"folder": class_dir.name, "reason": "not a WBC class"})
            logger.warning(f"{tag.value}: skipping folder {class_dir.name}")
            continue
        for image in _iter_images(class_dir):
            records.append(
                ImageRecord(path=image.relative_to(root).as_posix(), label=wbc, dataset=tag)
            )

    manifest = DatasetManifest.from_records(root, records, report=report)
    _check_coverage(tag, manifest.class_counts, report)
    _check_counts(tag, manifest.class_counts, report)
    logger.info(f"{tag.value}: {len(manifest)} images")
    return manifest


def scan_lisc(root: Path) -> DatasetManifest:
    """Scan LISC class folders (``Baso``, ``eosi``, ``lymp``, ``mono``, ``neut``).

    Any other folder (e.g. ``mixt``) is excluded and listed in the skip report.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"LISC root does not exist: {root}")

    report = ScanReport(dataset=DatasetTag.LISC)
    records: List[ImageRecord] = []
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        wbc = _match_class(folder.name)
        if wbc is None:
            skipped = sum(1 for _ in _iter_images(folder))
            report.skipped.append(
                {"folder": folder.name, "images": skipped, "reason": "unmappable class folder"}
            )
            logger.warning(f"LISC: skipping folder {folder.name} ({skipped} images)")
            continue
        for image in _iter_images(folder):
            records.append(
                ImageRecord(
                    path=image.relative_to(root).as_posix(), label=wbc, dataset=DatasetTag.LISC
                )
            )

    if not records:
        raise ManifestError(f"LISC root {root} yielded no images of the five classes")

    manifest = DatasetManifest.from_records(root, records, report=report)
    _check_coverage(DatasetTag.LISC, manifest.class_counts, report)
    _check_counts(DatasetTag.LISC, manifest.class_counts, report)
    logger.info(f"LISC: {len(manifest)} images")
    return manifest


def load_sample(
    record: ImageRecord,
    cfg: PreprocessConfig,
    rng: Optional[np.random.Generator],
    training: bool,
    root: Optional[Path] = None,
) -> Tuple[np.ndarray, WbcClass]:
    """Decode, resize, optionally flip and standardize one image.

    Returns an ``H x W x 3`` float32 array. The rng is only consumed when
    flips are enabled, so evaluation output never depends on it.
    """
    path = (Path(root) / record.path) if root is not None else Path(record.path)
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if cfg.center_crop_fraction is not None:
                img = _center_crop(img, cfg.center_crop_fraction)
            if img.size != (cfg.target_size, cfg.target_size):
                img = img.resize((cfg.target_size, cfg.target_size), Image.BILINEAR)
            pixels = np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, UnidentifiedImageError) as err:
        raise RecordDecodeError(path, str(err)) from err

    if training and cfg.train_augment:
        if rng is None:
            raise ValueError("training-mode sampling with flips needs an rng")
        if rng.random() < 0.5:
            pixels = pixels[:, ::-1, :]
        if rng.random() < 0.5:
            pixels = pixels[::-1, :, :]

    mean = np.asarray(cfg.channel_mean, dtype=np.float32)
    std = np.asarray(cfg.channel_std, dtype=np.float32)
    out = np.ascontiguousarray((pixels - mean) / std, dtype=np.float32)
    return out, record.label


def _center_crop(img: Image.Image, fraction: float) -> Image.Image:
    width, height = img.size
    side = int(round(min(width, height) * fraction))
    left = (width - side) // 2
    top = (height - side) // 2
    return img.crop((left, top, left + side, top + side))


def stratified_sample(manifest: DatasetManifest, n_per_class: int, seed: int) -> DatasetManifest:
    """Draw exactly ``n_per_class`` records per class without replacement."""
    if n_per_class < 0:
        raise ValueError("n_per_class must be nonnegative")
    for wbc in WbcClass:
        available = manifest.class_counts[wbc]
        if available < n_per_class:
            raise ManifestError(
                f"class {wbc.name} has only {available} records, {n_per_class} requested"
            )

    rng = np.random.default_rng(seed)
    chosen: List[ImageRecord] = []
    for wbc in WbcClass:
        pool = [r for r in manifest.records if r.label == wbc]
        idx = rng.choice(len(pool), size=n_per_class, replace=False)
        chosen.extend(pool[i] for i in sorted(idx))
    return DatasetManifest.from_records(manifest.root, chosen)


def concat_manifests(manifests: Sequence[DatasetManifest]) -> List[Tuple[Path, ImageRecord]]:
    """Flatten manifests into (root, record) pairs, keeping per-manifest order."""
    return [(m.root, r) for m in manifests for r in m.records]


# --- persistence ---


def write_manifest(manifest: DatasetManifest, path: Path) -> Path:
    """Write ``path,label,dataset`` CSV; the scan report goes next to it as JSON."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# root={manifest.root.as_posix()}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "dataset"])
        for record in manifest.records:
            writer.writerow([record.path, record.label.name, record.dataset.value])
    if manifest.report is not None:
        report_path = path.with_suffix(".report.json")
        report_path.write_text(
            json.dumps(manifest.report.to_dict(), ensure_ascii=True, indent=2, sort_keys=True)
        )
    return path


def read_manifest(path: Path, root: Optional[Path] = None) -> DatasetManifest:
    if not path.exists():
        raise ConfigurationError(f"manifest not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        first = fh.readline()
        stored_root: Optional[Path] = None
        if first.startswith("# root="):
            stored_root = Path(first[len("# root="):].strip())
        else:
            fh.seek(0)
        reader = csv.DictReader(fh)
        records = [
            ImageRecord(
                path=row["path"],
                label=WbcClass.parse(row["label"]),
                dataset=DatasetTag(row["dataset"]),
            )
            for row in reader
        ]
    base = root or stored_root or path.parent
    return DatasetManifest.from_records(base, records)


# --- torch adapter ---


class WbcDataset(Dataset):
    """Torch view of one or more manifests.

    Each item draws its flips from a generator keyed by (seed, epoch, index),
    so any number of loader workers reproduces the same stream.
    """

    def __init__(
        self,
        manifests: Sequence[DatasetManifest] | DatasetManifest,
        cfg: PreprocessConfig,
        training: bool,
        seed: int = 0,
    ) -> None:
        if isinstance(manifests, DatasetManifest):
            manifests = [manifests]
        self.items = concat_manifests(manifests)
        self.cfg = cfg
        self.training = training
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, int]:
        root, record = self.items[index]
        rng = np.random.default_rng((self.seed, self.epoch, index)) if self.training else None
        pixels, label = load_sample(record, self.cfg, rng, self.training, root=root)
        return torch.from_numpy(pixels.transpose(2, 0, 1).copy()), int(label)
