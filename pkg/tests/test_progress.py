from __future__ import annotations

import io
import sys

from wbcbench.progress import SweepProgress, TrainProgress, format_time


class _Tty(io.StringIO):
    def isatty(self) -> bool:
        return True


def test_format_time() -> None:
    assert format_time(42) == "42s"
    assert format_time(125) == "2m 5s"
    assert format_time(7300) == "2h 1m"


def test_status_lines_stay_off_stdout(capsys) -> None:
    progress = TrainProgress(label="desk-bn seed 0", total_epochs=2, steps_per_epoch=3)
    progress.update(1.6, 1e-3)
    progress.print_status()
    progress.print_summary()
    captured = capsys.readouterr()
    assert captured.out == ""
    assert "\033" not in captured.err
    assert captured.err.startswith("Done: desk-bn seed 0 1 steps")


def test_status_lines_on_a_terminal(monkeypatch) -> None:
    tty = _Tty()
    monkeypatch.setattr(sys, "stderr", tty)
    sweep = SweepProgress(total_runs=4)
    sweep.begin("a")
    sweep.update(done=1, skipped=1)
    sweep.print_status()
    sweep.print_summary()
    text = tty.getvalue()
    assert text.startswith("\r\033[K[Sweep 2/4] a | 1 trained, 1 resumed")
    assert "\nDone: 1 trained, 1 resumed, 0 failed" in text
