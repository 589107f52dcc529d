"""Accuracy, confusion matrices, per-class metrics, seed CIs and comparison tables."""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import stats
from sklearn.metrics import confusion_matrix as sk_confusion_matrix
from torch.utils.data import DataLoader

from .classes import NUM_CLASSES, DatasetTag, WbcClass
from .datasets import DatasetManifest, PreprocessConfig, WbcDataset
from .modelzoo import PUBLISHED_TARGETS, VARIANT_DESCRIPTIONS, VARIANT_ORDER

if TYPE_CHECKING:
    from .trainer import RunResult

logger = logging.getLogger(__name__)

CI_LEVEL = 0.95


class EvalResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    dataset: DatasetTag
    confusion: List[List[int]]
    accuracy: float
    n: int
    absent_classes: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_confusion(self) -> "EvalResult":
        cm = np.asarray(self.confusion)
        if cm.shape != (NUM_CLASSES, NUM_CLASSES):
            raise ValueError(f"confusion must be {NUM_CLASSES}x{NUM_CLASSES}, got {cm.shape}")
        if (cm < 0).any():
            raise ValueError("confusion entries must be nonnegative")
        if int(cm.sum()) != self.n or self.n <= 0:
            raise ValueError(f"confusion total {int(cm.sum())} does not match n={self.n}")
        if abs(self.accuracy - 100.0 * np.trace(cm) / self.n) > 1e-9:
            raise ValueError("accuracy must equal 100 * trace / n")
        return self

    @classmethod
    def from_confusion(cls, dataset: DatasetTag, confusion: np.ndarray) -> "EvalResult":
        cm = np.asarray(confusion, dtype=np.int64)
        n = int(cm.sum())
        absent = [c.name for c in WbcClass if cm[int(c)].sum() == 0]
        return cls(
            dataset=dataset,
            confusion=cm.tolist(),
            accuracy=100.0 * float(np.trace(cm)) / n if n else 0.0,
            n=n,
            absent_classes=absent,
        )

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.confusion, dtype=np.int64)

    @property
    def majority_baseline(self) -> float:
        """Accuracy of always predicting the most frequent true class."""
        return 100.0 * float(self.matrix.sum(axis=1).max()) / self.n


class ClassMetricRow(BaseModel):
    wbc_class: str
    precision: float
    recall: float
    f_measure: float
    support: int
    precision_undefined: bool = False
    recall_undefined: bool = False


class ClassMetrics(BaseModel):
    rows: List[ClassMetricRow]

    def row(self, wbc: WbcClass) -> ClassMetricRow:
        return self.rows[int(wbc)]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([r.model_dump() for r in self.rows]).set_index("wbc_class")
        return frame.round(2)


class CiSummary(BaseModel):
    model_config = ConfigDict(frozen=True)

    mean: float
    half_width: Optional[float]
    n_runs: int
    level: float = CI_LEVEL
    # single-run point estimate
    undefined: bool = False

    def format(self) -> str:
        if self.undefined or self.half_width is None:
            return f"{self.mean:.2f} (n=1, no CI)"
        return f"{self.mean:.2f}±{self.half_width:.2f}"


@torch.no_grad()
def predict(
    model: torch.nn.Module,
    manifest: DatasetManifest,
    preprocess: Optional[PreprocessConfig] = None,
    device: str = "cpu",
    batch_size: int = 64,
    num_workers: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    preprocess = preprocess or PreprocessConfig(train_augment=False)
    dataset = WbcDataset(manifest, preprocess, training=False)
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False, num_workers=num_workers)
    was_training = model.training
    model.eval()
    y_true: List[np.ndarray] = []
    y_pred: List[np.ndarray] = []
    try:
        for images, labels in loader:
            logits = model(images.to(device))
            y_pred.append(logits.argmax(dim=1).cpu().numpy())
            y_true.append(labels.numpy())
    finally:
        model.train(was_training)
    return np.concatenate(y_true), np.concatenate(y_pred)


def evaluate(
    model: torch.nn.Module,
    manifest: DatasetManifest,
    preprocess: Optional[PreprocessConfig] = None,
    device: str = "cpu",
    batch_size: int = 64,
    num_workers: int = 0,
) -> EvalResult:
    """Confusion matrix and accuracy of ``model`` over every record of ``manifest``."""
    if len(manifest) == 0:
        raise ValueError("cannot evaluate on an empty manifest")
    y_true, y_pred = predict(model, manifest, preprocess, device, batch_size, num_workers)
    cm = sk_confusion_matrix(y_true, y_pred, labels=list(range(NUM_CLASSES)))
    result = EvalResult.from_confusion(manifest.tag, cm)
    if result.absent_classes:
        logger.warning(
            f"{result.dataset.value}: no samples for {', '.join(result.absent_classes)}; "
            f"majority baseline {result.majority_baseline:.2f}%"
        )
    logger.info(f"{result.dataset.value}: accuracy {result.accuracy:.2f}% over {result.n} images")
    return result


def f_measure(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def per_class_metrics(confusion: np.ndarray | Sequence[Sequence[int]]) -> ClassMetrics:
    """Per-class precision/recall/F in percent.

    Zero denominators yield 0.00 with the matching ``*_undefined`` flag set.
    """
    cm = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(100.0 * tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(100.0 * tp, actual, out=np.zeros_like(tp), where=actual > 0)

    rows = []
    for c in WbcClass:
        i = int(c)
        rows.append(
            ClassMetricRow(
                wbc_class=c.name,
                precision=float(precision[i]),
                recall=float(recall[i]),
                f_measure=f_measure(float(precision[i]), float(recall[i])),
                support=int(actual[i]),
                precision_undefined=bool(predicted[i] == 0),
                recall_undefined=bool(actual[i] == 0),
            )
        )
    return ClassMetrics(rows=rows)


def aggregate_ci(values: Sequence[float], level: float = CI_LEVEL) -> CiSummary:
    """Mean with a two-sided Student-t interval over runs (n - 1 degrees of freedom)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("aggregate_ci needs at least one value")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    mean = float(arr.mean())
    n = int(arr.size)
    if n == 1:
        return CiSummary(mean=mean, half_width=None, n_runs=1, level=level, undefined=True)
    s = float(arr.std(ddof=1))
    t = float(stats.t.ppf((1.0 + level) / 2.0, n - 1))
    return CiSummary(mean=mean, half_width=t * s / np.sqrt(n), n_runs=n, level=level)


def select_representative_run(runs: Sequence["RunResult"], dataset: DatasetTag) -> "RunResult":
    """The run whose accuracy on ``dataset`` is closest to the mean (lowest seed on ties)."""
    candidates = [r for r in runs if dataset.value in r.eval_results]
    if not candidates:
        raise ValueError(f"no run was evaluated on {dataset.value}")
    mean = float(np.mean([r.eval_results[dataset.value].accuracy for r in candidates]))
    return min(candidates, key=lambda r: (abs(r.eval_results[dataset.value].accuracy - mean), r.seed))


# --- comparison tables and reports ---


class VariantRow(BaseModel):
    variant: str
    description: str
    n_runs: int
    seeds: List[int]
    cells: Dict[str, Optional[CiSummary]]
    published: Dict[str, List[Tuple[float, float]]] = Field(default_factory=dict)
    notes: List[str] = Field(default_factory=list)


class ComparisonTable(BaseModel):
    datasets: List[DatasetTag]
    rows: List[VariantRow]

    def to_frame(self) -> pd.DataFrame:
        records = []
        for row in self.rows:
            record: Dict[str, object] = {"variant": row.variant, "description": row.description, "n_runs": row.n_runs}
            for tag in self.datasets:
                cell = row.cells.get(tag.value)
                record[tag.value] = cell.format() if cell is not None else ""
                targets = row.published.get(tag.value, [])
                record[f"{tag.value} (published)"] = " / ".join(f"{m:.2f}±{h:.2f}" for m, h in targets)
            record["notes"] = "; ".join(row.notes)
            records.append(record)
        return pd.DataFrame.from_records(records)

    def to_csv(self) -> str:
        return self.to_frame().to_csv(index=False, lineterminator="\n")

    def to_text(self) -> str:
        return self.to_frame().to_string(index=False)


def _variant_sort_key(key: str) -> Tuple[int, str]:
    return (VARIANT_ORDER.index(key), key) if key in VARIANT_ORDER else (len(VARIANT_ORDER), key)


def compare_variants(
    results: Mapping[str, Sequence["RunResult"]],
    datasets: Optional[Sequence[DatasetTag]] = None,
    targets: Mapping[str, Mapping[str, List[Tuple[float, float]]]] = PUBLISHED_TARGETS,
) -> ComparisonTable:
    """Mean±CI per variant and test set, rows in the published table order."""
    if not results:
        raise ValueError("compare_variants needs at least one variant")
    for key, runs in results.items():
        if not runs:
            raise ValueError(f"variant {key} has no runs")

    if datasets is None:
        present = {name for runs in results.values() for r in runs for name in r.eval_results}
        datasets = [tag for tag in DatasetTag if tag.value in present]

    rows: List[VariantRow] = []
    for key in sorted(results, key=_variant_sort_key):
        runs = sorted(results[key], key=lambda r: r.seed)
        cells: Dict[str, Optional[CiSummary]] = {}
        notes: List[str] = []
        for tag in datasets:
            accs = [r.eval_results[tag.value].accuracy for r in runs if tag.value in r.eval_results]
            if not accs:
                cells[tag.value] = None
                notes.append(f"no {tag.value} results")
                continue
            if len(accs) < len(runs):
                notes.append(f"{tag.value} covers {len(accs)} of {len(runs)} runs")
            cells[tag.value] = aggregate_ci(accs)
        if len(runs) == 1:
            notes.append("point estimate (single seed)")
            logger.warning(f"{key}: single seed, no confidence interval")
        rows.append(
            VariantRow(
                variant=key,
                description=VARIANT_DESCRIPTIONS.get(key, runs[0].spec.key),
                n_runs=len(runs),
                seeds=[r.seed for r in runs],
                cells=cells,
                published={k: list(v) for k, v in targets.get(key, {}).items()},
                notes=notes,
            )
        )
    return ComparisonTable(datasets=list(datasets), rows=rows)


class RepresentativeRun(BaseModel):
    seed: int
    accuracy: float
    confusion: List[List[int]]
    class_metrics: ClassMetrics


class BenchmarkReport(BaseModel):
    comparison: ComparisonTable
    representative: Dict[str, Dict[str, RepresentativeRun]]
    majority_baselines: Dict[str, float]
    notes: List[str] = Field(default_factory=list)


def build_report(results: Mapping[str, Sequence["RunResult"]]) -> BenchmarkReport:
    comparison = compare_variants(results)
    representative: Dict[str, Dict[str, RepresentativeRun]] = {}
    baselines: Dict[str, float] = {}
    notes: List[str] = []

    for key, runs in results.items():
        per_dataset: Dict[str, RepresentativeRun] = {}
        for tag in comparison.datasets:
            try:
                chosen = select_representative_run(runs, tag)
            except ValueError:
                continue
            ev = chosen.eval_results[tag.value]
            per_dataset[tag.value] = RepresentativeRun(
                seed=chosen.seed,
                accuracy=ev.accuracy,
                confusion=ev.confusion,
                class_metrics=per_class_metrics(ev.confusion),
            )
            baselines.setdefault(tag.value, ev.majority_baseline)
            if ev.absent_classes:
                note = f"{tag.value} lacks {', '.join(ev.absent_classes)}; majority baseline {ev.majority_baseline:.2f}%"
                if note not in notes:
                    notes.append(note)
        representative[key] = per_dataset

    return BenchmarkReport(
        comparison=comparison,
        representative=representative,
        majority_baselines=baselines,
        notes=sorted(notes),
    )


def _dump_json(payload: object, path: Path) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_report(report: BenchmarkReport, out_dir: Path) -> Dict[str, Path]:
    """Write report.json/csv/txt plus the JSON schema; output bytes depend only on ``report``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out_dir / "report.json",
        "csv": out_dir / "report.csv",
        "txt": out_dir / "report.txt",
        "schema": out_dir / "report.schema.json",
    }
    _dump_json(report.model_dump(mode="json"), paths["json"])
    paths["csv"].write_text(report.comparison.to_csv(), encoding="utf-8")

    lines = [report.comparison.to_text(), ""]
    for key, per_dataset in sorted(report.representative.items(), key=lambda kv: _variant_sort_key(kv[0])):
        for dataset, rep in per_dataset.items():
            lines.append(f"{key} on {dataset}: representative seed {rep.seed} ({rep.accuracy:.2f}%)")
            lines.append(rep.class_metrics.to_frame().to_string())
            lines.append("")
    for dataset, baseline in sorted(report.majority_baselines.items()):
        lines.append(f"majority-class baseline on {dataset}: {baseline:.2f}%")
    lines.extend(report.notes)
    paths["txt"].write_text("\n".join(lines) + "\n", encoding="utf-8")

    _dump_json(BenchmarkReport.model_json_schema(), paths["schema"])
    logger.info(f"Wrote report to {out_dir}")
    return paths
