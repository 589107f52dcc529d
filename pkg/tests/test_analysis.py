from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
import torch

from wbcbench.analysis import (
    EmbeddingSet,
    build_tsne_figure,
    cross_domain_ratio,
    plot_confusion,
    render_report_figures,
    silhouette_2d,
    tsne_embed,
)
from wbcbench.checks import REFERENCE_LISC_CONFUSION
from wbcbench.classes import DatasetTag, WbcClass
from wbcbench.modelzoo import DESK_SPECS, build_model
from wbcbench.synthetic import SynthConfig, ensure_synthetic_pair
from wbcbench.trainer import TrainConfig

from test_evaluator import make_run


def _blobs(seed: int = 0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0, 20, size=(5, 16))
    labels = [WbcClass(i % 5) for i in range(100)]
    points = np.stack([centers[int(c)] + rng.normal(0, 0.5, size=16) for c in labels])
    return points, labels


def test_tsne_separates_blobs_deterministically() -> None:
    points, labels = _blobs()
    coords = tsne_embed(points, tsne_seed=0, perplexity=10)
    assert coords.shape == (100, 2)
    np.testing.assert_allclose(coords.mean(axis=0), 0.0, atol=1e-8)
    np.testing.assert_array_equal(coords, tsne_embed(points, tsne_seed=0, perplexity=10))
    assert silhouette_2d(coords, labels) > 0.5


def test_tsne_rejects_bad_input() -> None:
    points, _ = _blobs()
    with pytest.raises(ValueError, match="perplexity"):
        tsne_embed(points[:30], perplexity=10)
    bad = points.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        tsne_embed(bad, perplexity=10)


def test_silhouette_needs_two_groups() -> None:
    coords = np.random.default_rng(0).normal(size=(10, 2))
    assert silhouette_2d(coords, ["x"] * 10) is None


def test_cross_domain_ratio_tracks_domain_separation() -> None:
    rng = np.random.default_rng(1)
    labels = [WbcClass(i % 5) for i in range(40)]
    tags = [DatasetTag.RAABIN_TEST_A] * 20 + [DatasetTag.LISC] * 20
    centers = rng.normal(0, 10, size=(5, 2))
    mixed = np.stack([centers[int(c)] + rng.normal(0, 1, 2) for c in labels])
    apart = mixed + np.array([[0.0, 0.0]] * 20 + [[50.0, 50.0]] * 20)
    assert cross_domain_ratio(mixed, labels, tags) < 2.0
    assert cross_domain_ratio(apart, labels, tags) > 5.0
    assert cross_domain_ratio(mixed, labels, [DatasetTag.LISC] * 40) is None


def test_embedding_set_checks_lengths() -> None:
    with pytest.raises(ValueError):
        EmbeddingSet(np.zeros((3, 2)), [WbcClass.LYMPHOCYTE] * 2, [DatasetTag.LISC] * 3, "x", 0, 5.0)


def test_confusion_figure_annotates_every_cell() -> None:
    fig = plot_confusion(REFERENCE_LISC_CONFUSION, "LISC")
    texts = [t.get_text() for t in fig.axes[0].texts]
    assert len(texts) == 25
    assert texts[0] == "54" and texts[-1] == "17"


def test_tsne_figure_on_synthetic_pair(tmp_path: Path) -> None:
    _, source, shifted = ensure_synthetic_pair(SynthConfig(root=tmp_path / "synth", n_per_class_train=1, n_per_class_test=4))
    torch.manual_seed(0)
    model = build_model(DESK_SPECS["desk-bn"])
    preprocess = TrainConfig.desk().preprocess(training=False)
    embedding = build_tsne_figure(model, source, shifted, n_per_class=3, seed=0, out_dir=tmp_path / "fig", preprocess=preprocess)

    assert len(embedding) == 30
    assert embedding.perplexity == pytest.approx(29 / 3)
    assert embedding.datasets.count(DatasetTag.SYNTH_SHIFTED) == 15
    for name in ("embedding.csv", "embedding.json", "tsne.svg", "tsne.png"):
        assert (tmp_path / "fig" / name).exists()
    summary = json.loads((tmp_path / "fig" / "embedding.json").read_text())
    assert summary["n"] == 30 and summary["spec"] == "desk-bn"


def test_report_figures(tmp_path: Path) -> None:
    results = {
        key: [make_run(key, s, {DatasetTag.SYNTH_SOURCE: 90.0 + s, DatasetTag.SYNTH_SHIFTED: 40.0 + 5 * s}) for s in range(3)]
        for key in ("desk-bn", "desk-gn")
    }
    written = render_report_figures(results, tmp_path)
    names = {p.name for p in written}
    assert {"box.svg", "bars.png", "confusion_desk-gn_SYNTH_SHIFTED.svg"} <= names
    assert all(p.exists() for p in written)
    with pytest.raises(ValueError):
        render_report_figures({}, tmp_path)
