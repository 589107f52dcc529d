"""Progress tracking and status lines for training runs and sweeps."""
from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field
from typing import Optional


def format_time(seconds: float) -> str:
    """Format seconds as human-readable time."""
    if seconds < 60:
        return f"{seconds:.0f}s"
    elif seconds < 3600:
        mins = int(seconds // 60)
        secs = int(seconds % 60)
        return f"{mins}m {secs}s"
    else:
        hours = int(seconds // 3600)
        mins = int((seconds % 3600) // 60)
        return f"{hours}h {mins}m"


def _write_status(line: str) -> None:
    # stdout carries results; status lines only on an interactive stderr
    if not sys.stderr.isatty():
        return
    sys.stderr.write(f"\r\033[K{line}")
    sys.stderr.flush()


def _write_summary(line: str) -> None:
    prefix = "\n" if sys.stderr.isatty() else ""
    print(f"{prefix}{line}", file=sys.stderr)


@dataclass
class TrainProgress:
    """Track steps, loss and learning rate of one training run."""

    label: str
    total_epochs: int
    steps_per_epoch: int
    epoch: int = 0
    steps_done: int = 0
    last_loss: float = float("nan")
    last_lr: float = 0.0
    enabled: bool = True
    start_time: float = field(default_factory=time.time)

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    def update(self, loss: float, lr: float) -> None:
        self.steps_done += 1
        self.last_loss = loss
        self.last_lr = lr

    def start_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def elapsed(self) -> float:
        return time.time() - self.start_time

    def eta_seconds(self) -> Optional[float]:
        if self.steps_done == 0:
            return None
        rate = self.steps_done / max(self.elapsed(), 1e-9)
        return (self.total_steps - self.steps_done) / rate

    def print_status(self) -> None:
        if not self.enabled:
            return
        pct = 100.0 * self.steps_done / max(self.total_steps, 1)
        parts = [
            f"[{self.label}]",
            f"epoch {self.epoch + 1}/{self.total_epochs}",
            f"({pct:.1f}%)",
            f"| loss {self.last_loss:.4f}",
            f"| lr {self.last_lr:.2e}",
            f"| {format_time(self.elapsed())}",
        ]
        eta = self.eta_seconds()
        if eta is not None and eta > 0:
            parts.append(f"| ETA: {format_time(eta)}")
        _write_status(" ".join(parts))

    def print_summary(self) -> None:
        if not self.enabled:
            return
        _write_summary(f"Done: {self.label} {self.steps_done:,} steps in {format_time(self.elapsed())} | final loss {self.last_loss:.4f}")


@dataclass
class SweepProgress:
    """Track (variant, seed) pairs of a benchmark sweep."""

    total_runs: int
    runs_done: int = 0
    runs_skipped: int = 0
    runs_failed: int = 0
    current: str = ""
    start_time: float = field(default_factory=time.time)

    def begin(self, label: str) -> None:
        self.current = label

    def update(self, done: int = 0, skipped: int = 0, failed: int = 0) -> None:
        self.runs_done += done
        self.runs_skipped += skipped
        self.runs_failed += failed

    def elapsed(self) -> float:
        return time.time() - self.start_time

    def print_status(self) -> None:
        finished = self.runs_done + self.runs_skipped + self.runs_failed
        parts = [
            f"[Sweep {finished}/{self.total_runs}]",
            f"{self.current}",
            f"| {self.runs_done} trained, {self.runs_skipped} resumed",
        ]
        if self.runs_failed:
            parts.append(f"| {self.runs_failed} failed")
        parts.append(f"| {format_time(self.elapsed())}")
        _write_status(" ".join(parts))

    def print_summary(self) -> None:
        _write_summary(
            f"Done: {self.runs_done} trained, {self.runs_skipped} resumed, "
            f"{self.runs_failed} failed in {format_time(self.elapsed())}"
        )
