"""Linear-warmup + cosine-decay learning rate schedule, per optimizer step."""
from __future__ import annotations

import math
from typing import Protocol

import torch
from torch.optim.lr_scheduler import LambdaLR


class ScheduleRangeError(ValueError):
    pass


class ScheduleParams(Protocol):
    peak_lr: float
    warmup_epochs: int
    decay_epochs: int


def total_steps(steps_per_epoch: int, cfg: ScheduleParams) -> int:
    return (cfg.warmup_epochs + cfg.decay_epochs) * steps_per_epoch


def lr_at(step: int, steps_per_epoch: int, cfg: ScheduleParams) -> float:
    """Learning rate at ``step`` (0-based).

    Rises linearly from 0 to ``peak_lr`` over the warmup epochs, then follows
    a half cosine down to 0. ``step == total_steps`` is accepted and gives 0.
    """
    if steps_per_epoch <= 0:
        raise ScheduleRangeError("steps_per_epoch must be positive")
    last = total_steps(steps_per_epoch, cfg)
    if not 0 <= step <= last:
        raise ScheduleRangeError(f"step {step} outside [0, {last}]")

    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    if step < warmup_steps:
        return cfg.peak_lr * step / warmup_steps

    decay_steps = cfg.decay_epochs * steps_per_epoch
    progress = (step - warmup_steps) / decay_steps
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class WarmupCosineScheduler(LambdaLR):
    """LambdaLR driving an optimizer whose base lr is ``peak_lr`` through :func:`lr_at`.

    Call ``step()`` once per optimizer step, not once per epoch.
    """

    def __init__(
        self,
        optimizer: torch.optim.Optimizer,
        cfg: ScheduleParams,
        steps_per_epoch: int,
        last_epoch: int = -1,
    ) -> None:
        self.cfg = cfg
        self.steps_per_epoch = steps_per_epoch
        super().__init__(optimizer=optimizer, lr_lambda=self.scale_lr, last_epoch=last_epoch)

    def scale_lr(self, step: int) -> float:
        return lr_at(step, self.steps_per_epoch, self.cfg) / self.cfg.peak_lr
