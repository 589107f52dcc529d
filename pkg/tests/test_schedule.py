from __future__ import annotations

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from wbcbench.schedule import ScheduleRangeError, WarmupCosineScheduler, lr_at, total_steps
from wbcbench.trainer import TrainConfig


def test_schedule_landmarks() -> None:
    cfg = TrainConfig()
    spe = 40
    warm = cfg.warmup_epochs * spe
    last = total_steps(spe, cfg)
    assert last == 100 * spe
    assert lr_at(0, spe, cfg) == 0.0
    assert lr_at(warm // 2, spe, cfg) == pytest.approx(cfg.peak_lr / 2)
    assert lr_at(warm, spe, cfg) == cfg.peak_lr
    assert lr_at(warm + cfg.decay_epochs * spe // 2, spe, cfg) == pytest.approx(cfg.peak_lr / 2)
    assert lr_at(last, spe, cfg) == pytest.approx(0.0, abs=1e-15)


def test_out_of_range_steps_raise() -> None:
    cfg = TrainConfig()
    with pytest.raises(ScheduleRangeError):
        lr_at(-1, 10, cfg)
    with pytest.raises(ScheduleRangeError):
        lr_at(total_steps(10, cfg) + 1, 10, cfg)
    with pytest.raises(ScheduleRangeError):
        lr_at(0, 0, cfg)


@given(st.integers(1, 30), st.data())
def test_schedule_stays_in_range_and_peaks_at_warmup_end(spe: int, data) -> None:
    cfg = TrainConfig.desk()
    step = data.draw(st.integers(0, total_steps(spe, cfg)))
    lr = lr_at(step, spe, cfg)
    assert 0.0 <= lr <= cfg.peak_lr
    warm = cfg.warmup_epochs * spe
    if step < warm:
        assert lr <= lr_at(step + 1, spe, cfg)
    elif step < total_steps(spe, cfg):
        assert lr >= lr_at(step + 1, spe, cfg)


def test_zero_warmup_starts_at_peak() -> None:
    cfg = TrainConfig(warmup_epochs=0, decay_epochs=5)
    assert lr_at(0, 7, cfg) == cfg.peak_lr


def test_scheduler_drives_optimizer_per_step() -> None:
    cfg = TrainConfig.desk()
    spe = 3
    param = torch.nn.Parameter(torch.zeros(1))
    optimizer = torch.optim.AdamW([param], lr=cfg.peak_lr)
    scheduler = WarmupCosineScheduler(optimizer, cfg, spe)
    seen = []
    for _ in range(total_steps(spe, cfg)):
        seen.append(optimizer.param_groups[0]["lr"])
        optimizer.step()
        scheduler.step()
    expected = [lr_at(s, spe, cfg) for s in range(total_steps(spe, cfg))]
    assert seen == pytest.approx(expected)
    assert optimizer.param_groups[0]["lr"] == pytest.approx(0.0, abs=1e-12)
