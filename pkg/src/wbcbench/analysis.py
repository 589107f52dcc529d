"""Feature-space analysis and figures.

Figures are written as SVG and PNG. Colors follow the class palette, and in
t-SNE scatters the marker encodes the dataset.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import torch  # noqa: E402
from scipy.spatial.distance import cdist  # noqa: E402
from sklearn.manifold import TSNE  # noqa: E402
from sklearn.metrics import silhouette_score  # noqa: E402
from torch.utils.data import DataLoader  # noqa: E402

from .classes import CLASS_COLORS, DatasetTag, WbcClass  # noqa: E402
from .datasets import DatasetManifest, PreprocessConfig, WbcDataset, stratified_sample  # noqa: E402
from .evaluator import compare_variants, select_representative_run  # noqa: E402
from .modelzoo import WbcModel, extract_features, variant_slug  # noqa: E402
from .storage import write_json  # noqa: E402
from .trainer import RunResult  # noqa: E402

logger = logging.getLogger(__name__)

DEFAULT_PERPLEXITY = 30.0
TSNE_ITERATIONS = 1000
DATASET_MARKERS = ("o", "x", "^", "s")

plt.rcParams["svg.hashsalt"] = "wbcbench"


@dataclass
class EmbeddingSet:
    coords: np.ndarray
    labels: List[WbcClass]
    datasets: List[DatasetTag]
    spec_key: str
    tsne_seed: int
    perplexity: float
    silhouette: Optional[float] = None
    cross_domain_ratio: Optional[float] = None
    extra: Dict[str, Optional[float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = self.coords.shape[0]
        if self.coords.shape != (n, 2) or len(self.labels) != n or len(self.datasets) != n:
            raise ValueError("coords, labels and datasets must share length N (coords N x 2)")

    def __len__(self) -> int:
        return self.coords.shape[0]

    def summary(self) -> Dict[str, object]:
        return {
            "n": len(self),
            "spec": self.spec_key,
            "tsne_seed": self.tsne_seed,
            "perplexity": self.perplexity,
            "silhouette": self.silhouette,
            "cross_domain_ratio": self.cross_domain_ratio,
            **self.extra,
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "x": self.coords[:, 0],
                "y": self.coords[:, 1],
                "label": [c.name for c in self.labels],
                "dataset": [t.value for t in self.datasets],
            }
        )


def tsne_embed(features: np.ndarray, tsne_seed: int = 0, perplexity: float = DEFAULT_PERPLEXITY) -> np.ndarray:
    """Deterministic 2-D t-SNE (PCA init), centered at the origin."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be N x D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    n = x.shape[0]
    if n <= 3 * perplexity:
        raise ValueError(f"perplexity {perplexity} too large for {n} points; need N > 3*perplexity (perplexity < {n / 3:.2f})")
    tsne = TSNE(
        n_components=2,
        perplexity=perplexity,
        init="pca",
        max_iter=TSNE_ITERATIONS,
        random_state=tsne_seed,
    )
    coords = tsne.fit_transform(x)
    return coords - coords.mean(axis=0, keepdims=True)


def silhouette_2d(coords: np.ndarray, groups: Sequence[object]) -> Optional[float]:
    keys = np.asarray([str(g) for g in groups])
    n_groups = len(set(keys.tolist()))
    if n_groups < 2 or n_groups >= len(keys):
        return None
    return float(silhouette_score(coords, keys))


def cross_domain_ratio(
    points: np.ndarray, labels: Sequence[WbcClass], datasets: Sequence[DatasetTag]
) -> Optional[float]:
    """Mean intra-class distance across datasets over mean intra-class distance within a dataset.

    Values near 1 mean the two domains mix; larger values mean the model keeps
    them apart. None when no class appears in two datasets.
    """
    pts = np.asarray(points, dtype=np.float64)
    lab = np.asarray([int(c) for c in labels])
    ds = np.asarray([str(getattr(t, "value", t)) for t in datasets])
    cross: List[float] = []
    within: List[float] = []
    for c in np.unique(lab):
        members = lab == c
        tags = np.unique(ds[members])
        if len(tags) < 2:
            continue
        for i, a in enumerate(tags):
            pa = pts[members & (ds == a)]
            if len(pa) > 1:
                d = cdist(pa, pa)
                within.append(float(d[np.triu_indices(len(pa), k=1)].mean()))
            for b in tags[i + 1 :]:
                cross.append(float(cdist(pa, pts[members & (ds == b)]).mean()))
    if not cross or not within:
        return None
    return float(np.mean(cross) / np.mean(within))


@torch.no_grad()
def manifest_features(
    model: WbcModel,
    manifest: DatasetManifest,
    preprocess: PreprocessConfig,
    device: str = "cpu",
    batch_size: int = 64,
) -> Tuple[np.ndarray, List[WbcClass]]:
    dataset = WbcDataset(manifest, preprocess, training=False)
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    feats: List[np.ndarray] = []
    labels: List[WbcClass] = []
    for images, y in loader:
        feats.append(extract_features(model, images.to(device)))
        labels.extend(WbcClass(int(v)) for v in y)
    return np.concatenate(feats), labels


def build_tsne_figure(
    model: WbcModel,
    raabin: DatasetManifest,
    lisc: DatasetManifest,
    n_per_class: int = 39,
    seed: int = 0,
    out_dir: Optional[Path] = None,
    preprocess: Optional[PreprocessConfig] = None,
    device: str = "cpu",
    perplexity: float = DEFAULT_PERPLEXITY,
) -> EmbeddingSet:
    """Sample both datasets per class, embed their penultimate features jointly and plot."""
    preprocess = preprocess or PreprocessConfig(train_augment=False)
    feats: List[np.ndarray] = []
    labels: List[WbcClass] = []
    tags: List[DatasetTag] = []
    for manifest in (raabin, lisc):
        sample = stratified_sample(manifest, n_per_class, seed)
        f, y = manifest_features(model, sample, preprocess, device)
        feats.append(f)
        labels.extend(y)
        tags.extend(r.dataset for r in sample.records)
    features = np.concatenate(feats)

    n = features.shape[0]
    effective = perplexity
    if n <= 3 * perplexity:
        effective = (n - 1) / 3.0
        logger.warning(f"only {n} points: perplexity lowered from {perplexity} to {effective:.2f}")

    coords = tsne_embed(features, tsne_seed=seed, perplexity=effective)
    embedding = EmbeddingSet(
        coords=coords,
        labels=labels,
        datasets=tags,
        spec_key=model.spec.key,
        tsne_seed=seed,
        perplexity=effective,
        silhouette=silhouette_2d(coords, [c.name for c in labels]),
        cross_domain_ratio=cross_domain_ratio(coords, labels, tags),
        extra={"feature_cross_domain_ratio": cross_domain_ratio(features, labels, tags)},
    )
    logger.info(
        f"t-SNE of {len(embedding)} points for {embedding.spec_key}: silhouette {embedding.silhouette}, "
        f"cross-domain ratio {embedding.cross_domain_ratio}"
    )
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        embedding.to_frame().to_csv(out_dir / "embedding.csv", index=False, lineterminator="\n")
        write_json(out_dir / "embedding.json", embedding.summary())
        fig = plot_embedding(embedding)
        save_figure(fig, out_dir, "tsne")
    return embedding


# --- plotting ---


def save_figure(fig: plt.Figure, out_dir: Path, stem: str) -> List[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    svg = out_dir / f"{stem}.svg"
    png = out_dir / f"{stem}.png"
    fig.savefig(svg, format="svg", metadata={"Date": None}, bbox_inches="tight")
    fig.savefig(png, format="png", dpi=150, bbox_inches="tight")
    plt.close(fig)
    return [svg, png]


def plot_embedding(embedding: EmbeddingSet) -> plt.Figure:
    fig, ax = plt.subplots(figsize=(6, 6))
    tags = sorted(set(embedding.datasets), key=lambda t: list(DatasetTag).index(t))
    labels = np.asarray([int(c) for c in embedding.labels])
    ds = np.asarray([t.value for t in embedding.datasets])
    for t_idx, tag in enumerate(tags):
        marker = DATASET_MARKERS[t_idx % len(DATASET_MARKERS)]
        for wbc in WbcClass:
            mask = (labels == int(wbc)) & (ds == tag.value)
            if not mask.any():
                continue
            ax.scatter(
                embedding.coords[mask, 0],
                embedding.coords[mask, 1],
                c=[CLASS_COLORS[int(wbc)]],
                marker=marker,
                s=24,
                label=f"{wbc.short} {tag.value}",
            )
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title(f"t-SNE of penultimate features ({embedding.spec_key})")
    ax.legend(fontsize=7, ncol=2, loc="best")
    return fig


def plot_confusion(confusion: Sequence[Sequence[int]], title: str) -> plt.Figure:
    cm = np.asarray(confusion, dtype=np.int64)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    ax.imshow(cm, cmap="Blues")
    names = [c.short for c in WbcClass]
    ax.set_xticks(range(len(names)), labels=names)
    ax.set_yticks(range(len(names)), labels=names)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    threshold = cm.max() / 2 if cm.max() else 0
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center", color="white" if cm[i, j] > threshold else "black")
    ax.set_title(title)
    return fig


def plot_seed_boxes(results: Mapping[str, Sequence[RunResult]], datasets: Sequence[DatasetTag]) -> plt.Figure:
    keys = [row.variant for row in compare_variants(results, datasets).rows]
    fig, axes = plt.subplots(1, len(datasets), figsize=(max(4, 1.2 * len(keys)) * len(datasets), 4), squeeze=False)
    rng = np.random.default_rng(0)
    for ax, tag in zip(axes[0], datasets):
        series = [[r.eval_results[tag.value].accuracy for r in results[k] if tag.value in r.eval_results] for k in keys]
        positions = [i + 1 for i, s in enumerate(series) if s]
        ax.boxplot([s for s in series if s], positions=positions, widths=0.5, showfliers=False)
        for pos, values in zip(positions, [s for s in series if s]):
            jitter = rng.uniform(-0.08, 0.08, size=len(values))
            ax.scatter(np.full(len(values), pos) + jitter, values, color="black", s=10, zorder=3)
        ax.set_xticks(range(1, len(keys) + 1), labels=keys)
        ax.set_ylabel("Accuracy (%)")
        ax.set_title(tag.value)
    return fig


def plot_variant_bars(results: Mapping[str, Sequence[RunResult]], datasets: Sequence[DatasetTag]) -> plt.Figure:
    table = compare_variants(results, datasets)
    n_rows = len(table.rows)
    width = 0.8 / max(len(datasets), 1)
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * n_rows), 4))
    x = np.arange(n_rows)
    for d_idx, tag in enumerate(datasets):
        means, errs = [], []
        for row in table.rows:
            cell = row.cells.get(tag.value)
            means.append(cell.mean if cell else 0.0)
            errs.append((cell.half_width or 0.0) if cell else 0.0)
        ax.bar(
            x + (d_idx - (len(datasets) - 1) / 2) * width,
            means,
            width,
            yerr=errs,
            capsize=3,
            color=CLASS_COLORS[d_idx % len(CLASS_COLORS)],
            label=tag.value,
        )
    ax.set_xticks(x, labels=[row.variant for row in table.rows])
    ax.set_ylabel("Accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    return fig


def render_report_figures(
    results: Mapping[str, Sequence[RunResult]],
    out_dir: Path,
    datasets: Optional[Sequence[DatasetTag]] = None,
    figures: Sequence[str] = ("box", "bars", "confusion"),
) -> List[Path]:
    """Box plot over seeds, mean±CI bars and representative confusion heatmaps."""
    if not results:
        raise ValueError("no run results to plot")
    if datasets is None:
        datasets = compare_variants(results).datasets
    written: List[Path] = []
    if "box" in figures:
        written += save_figure(plot_seed_boxes(results, datasets), out_dir, "box")
    if "bars" in figures:
        written += save_figure(plot_variant_bars(results, datasets), out_dir, "bars")
    if "confusion" in figures:
        for key in sorted(results):
            for tag in datasets:
                try:
                    run = select_representative_run(results[key], tag)
                except ValueError:
                    continue
                fig = plot_confusion(run.eval_results[tag.value].confusion, f"{key} on {tag.value} (seed {run.seed})")
                written += save_figure(fig, out_dir, f"confusion_{variant_slug(key)}_{tag.value}")
    logger.info(f"Wrote {len(written)} figure files to {out_dir}")
    return written
