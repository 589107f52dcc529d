from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from wbcbench.classes import DatasetTag, WbcClass
from wbcbench.synthetic import (
    ShiftParams,
    SynthConfig,
    apply_shift,
    domain_probe_accuracy,
    ensure_synthetic_pair,
    make_synthetic_domain_pair,
    render_cell,
)


def _pixels(manifest, record) -> np.ndarray:
    with Image.open(manifest.absolute(record)) as img:
        return np.asarray(img.convert("RGB"))


def test_pair_has_requested_counts_and_tags(tmp_path: Path) -> None:
    cfg = SynthConfig(root=tmp_path, n_per_class_train=4, n_per_class_test=3)
    train, source, shifted = make_synthetic_domain_pair(cfg)
    assert len(train) == 20 and len(source) == 15 and len(shifted) == 15
    assert all(n == 3 for n in shifted.class_counts.values())
    assert source.tag is DatasetTag.SYNTH_SOURCE
    assert shifted.tag is DatasetTag.SYNTH_SHIFTED


def test_zero_shift_reproduces_source_images(tmp_path: Path) -> None:
    zero = ShiftParams(channel_gain=(0.0, 0.0, 0.0), channel_bias=(0.0, 0.0, 0.0), background_tint=(0.0, 0.0, 0.0))
    assert zero.is_zero
    cfg = SynthConfig(root=tmp_path, n_per_class_train=1, n_per_class_test=2, shift_params=zero)
    _, source, shifted = make_synthetic_domain_pair(cfg)
    for a, b in zip(source.records, shifted.records):
        np.testing.assert_array_equal(_pixels(source, a), _pixels(shifted, b))


def test_rendering_is_seeded(tmp_path: Path) -> None:
    img_a, bg_a = render_cell(WbcClass.NEUTROPHIL, 32, np.random.default_rng(5))
    img_b, bg_b = render_cell(WbcClass.NEUTROPHIL, 32, np.random.default_rng(5))
    np.testing.assert_array_equal(img_a, img_b)
    np.testing.assert_array_equal(bg_a, bg_b)
    assert img_a.min() >= 0.0 and img_a.max() <= 1.0


def test_shift_moves_mean_color() -> None:
    img, background = render_cell(WbcClass.MONOCYTE, 32, np.random.default_rng(0))
    moved = apply_shift(img, background, ShiftParams())
    assert not np.allclose(moved.mean(axis=(0, 1)), img.mean(axis=(0, 1)), atol=0.02)


def test_domains_are_linearly_separable_by_color(tmp_path: Path) -> None:
    _, source, shifted = make_synthetic_domain_pair(SynthConfig(root=tmp_path, n_per_class_train=1, n_per_class_test=6))
    assert domain_probe_accuracy(source, shifted) >= 0.95


def test_ensure_reuses_matching_render(tmp_path: Path) -> None:
    cfg = SynthConfig(root=tmp_path, n_per_class_train=2, n_per_class_test=2)
    first = ensure_synthetic_pair(cfg)
    stamp = (tmp_path / "synth.json").stat().st_mtime_ns
    again = ensure_synthetic_pair(cfg)
    assert (tmp_path / "synth.json").stat().st_mtime_ns == stamp
    assert [m.records for m in again] == [m.records for m in first]

    bigger = ensure_synthetic_pair(SynthConfig(root=tmp_path, n_per_class_train=3, n_per_class_test=2))
    assert len(bigger[0]) == 15


def test_invalid_config() -> None:
    with pytest.raises(ValueError):
        SynthConfig(root=Path("x"), n_per_class_train=0)
    with pytest.raises(ValueError):
        SynthConfig(root=Path("x"), image_size=8)


def test_rerender_drops_images_from_a_larger_render(tmp_path: Path) -> None:
    ensure_synthetic_pair(SynthConfig(root=tmp_path, n_per_class_train=4, n_per_class_test=3))
    train, source, shifted = ensure_synthetic_pair(SynthConfig(root=tmp_path, n_per_class_train=2, n_per_class_test=1))
    assert len(list((tmp_path / "train").rglob("*.png"))) == len(train) == 10
    assert len(list((tmp_path / "test_source").rglob("*.png"))) == len(source) == 5
    assert len(list((tmp_path / "test_shifted").rglob("*.png"))) == len(shifted) == 5
