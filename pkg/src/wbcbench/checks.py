"""Desk-scale oracle suites run by ``wbcbench desk-check``.

Each suite returns a :class:`CheckResult`; none of them needs a GPU, the real
datasets or pretrained weights.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .classes import EXPECTED_COUNTS, DatasetTag, WbcClass
from .config import Config, load_config
from .evaluator import EvalResult, aggregate_ci, f_measure, per_class_metrics
from .modelzoo import DESK_SPECS, build_model
from .normalization import (
    BnState,
    FrozenBatchNorm2d,
    GnParams,
    Mode,
    batch_norm_forward,
    bn_state_from_module,
    group_norm_forward,
    instance_norm_forward,
    layer_norm_forward,
)
from .schedule import lr_at, total_steps
from .storage import ResultsStore, write_json
from .synthetic import SynthConfig, ensure_synthetic_pair
from .trainer import TrainConfig, run_benchmark, train

logger = logging.getLogger(__name__)

# Published per-class precision/recall/F on LISC for the selected GN model.
PUBLISHED_LISC_METRICS: Dict[WbcClass, tuple] = {
    WbcClass.BASOPHIL: (94.44, 30.91, 46.58),
    WbcClass.EOSINOPHIL: (69.23, 92.31, 79.12),
    WbcClass.LYMPHOCYTE: (68.35, 91.53, 78.26),
    WbcClass.MONOCYTE: (54.90, 58.33, 56.57),
    WbcClass.NEUTROPHIL: (98.25, 100.0, 99.12),
}

# A LISC confusion matrix (rows true, columns predicted, class-code order)
# consistent with the published per-class metrics; accuracy 191/257.
REFERENCE_LISC_CONFUSION = [
    [54, 5, 0, 0, 0],
    [20, 28, 0, 0, 0],
    [0, 0, 56, 0, 0],
    [1, 0, 1, 36, 1],
    [4, 18, 0, 16, 17],
]

GN_MARGIN_POINTS = 15.0
SOURCE_FLOOR = 90.0


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    data: Dict[str, object] = field(default_factory=dict)


def _timed(name: str, fn: Callable[[], CheckResult]) -> CheckResult:
    start = time.time()
    try:
        result = fn()
    except Exception as exc:  # a crashing suite is a failed suite
        logger.exception(f"check {name} crashed")
        result = CheckResult(name, False, f"{type(exc).__name__}: {exc}")
    result.seconds = round(time.time() - start, 2)
    level = logging.INFO if result.passed else logging.ERROR
    logger.log(level, f"[{'PASS' if result.passed else 'FAIL'}] {name}: {result.detail}")
    return result


# --- brute-force oracles ---


def brute_force_batch_norm(x: np.ndarray, eps: float) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    for c in range(x.shape[1]):
        values = x[:, c].ravel()
        mu = sum(values) / len(values)
        var = sum((v - mu) ** 2 for v in values) / len(values)
        out[:, c] = (x[:, c] - mu) / np.sqrt(var + eps)
    return out


def brute_force_group_norm(x: np.ndarray, groups: int, eps: float) -> np.ndarray:
    n, c, h, w = x.shape
    per = c // groups
    out = np.empty_like(x, dtype=np.float64)
    for i in range(n):
        for g in range(groups):
            block = x[i, g * per : (g + 1) * per]
            values = block.ravel()
            mu = sum(values) / len(values)
            var = sum((v - mu) ** 2 for v in values) / len(values)
            out[i, g * per : (g + 1) * per] = (block - mu) / np.sqrt(var + eps)
    return out


def check_normalization_oracles(n_shapes: int = 100, seed: int = 0, tol: float = 1e-5) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_shapes):
        groups = int(rng.integers(1, 5))
        c = groups * int(rng.integers(1, 4))
        n, h, w = (int(v) for v in rng.integers(1, 5, size=3))
        if n * h * w < 2:
            n = 2
        x = rng.normal(rng.uniform(-3, 3), rng.uniform(0.1, 4), size=(n, c, h, w))

        bn = batch_norm_forward(x, BnState.identity(c), Mode.TRAIN)
        worst = max(worst, float(np.abs(bn - brute_force_batch_norm(x, 1e-5)).max()))
        gn = group_norm_forward(x, GnParams.identity(c, groups))
        worst = max(worst, float(np.abs(gn - brute_force_group_norm(x, groups, 1e-5)).max()))
        inst = group_norm_forward(x, GnParams.identity(c, c))
        worst = max(worst, float(np.abs(inst - instance_norm_forward(x)).max()))
        ln = layer_norm_forward(x, np.ones(c), np.zeros(c))
        worst = max(worst, float(np.abs(ln - group_norm_forward(x, GnParams.identity(c, 1))).max()))

        torch_bn = nn.BatchNorm2d(c).double().train()
        worst = max(worst, float(np.abs(torch_bn(torch.from_numpy(x)).detach().numpy() - bn).max()))
        torch_gn = nn.GroupNorm(groups, c).double()
        worst = max(worst, float(np.abs(torch_gn(torch.from_numpy(x)).detach().numpy() - gn).max()))

    return CheckResult(
        "normalization-oracles",
        worst <= tol,
        f"max deviation {worst:.2e} over {n_shapes} shapes (tol {tol:g})",
        data={"max_deviation": worst},
    )


def check_bn_shift_mechanism(deltas: Sequence[float] = (0.5, 1.0, 2.0), seed: int = 0) -> CheckResult:
    """Evaluation-mode BN passes a global input shift through; GN removes it."""
    rng = np.random.default_rng(seed)
    c = 4
    data = rng.normal(1.5, 0.8, size=(64, c, 6, 6))
    state = BnState.identity(c)
    for _ in range(200):
        batch_norm_forward(data, state, Mode.TRAIN)

    bn_means: List[float] = []
    gn_means: List[float] = []
    ok = True
    for delta in deltas:
        out = batch_norm_forward(data + delta, state, Mode.EVAL)
        observed = float(out.mean())
        expected = float(np.mean(delta / np.sqrt(state.running_var + state.eps)))
        ok &= abs(observed - expected) <= 0.05 * abs(expected)
        bn_means.append(observed)
        gn_out = group_norm_forward(data + delta, GnParams.identity(c, 2))
        gn_means.append(float(np.abs(gn_out.mean(axis=(1, 2, 3))).max()))
    ok &= all(a < b for a, b in zip(bn_means, bn_means[1:]))
    ok &= max(gn_means) < 1e-5
    return CheckResult(
        "bn-shift-mechanism",
        bool(ok),
        f"BN eval output means {[round(m, 3) for m in bn_means]}, GN max |mean| {max(gn_means):.1e}",
        data={"bn_means": bn_means, "gn_means": gn_means},
    )


def check_metrics_fidelity(tol: float = 0.01) -> CheckResult:
    problems: List[str] = []
    for wbc, (p, r, f) in PUBLISHED_LISC_METRICS.items():
        if abs(f_measure(p, r) - f) > tol:
            problems.append(f"F({wbc.name})")
    metrics = per_class_metrics(REFERENCE_LISC_CONFUSION)
    for wbc, (p, r, _) in PUBLISHED_LISC_METRICS.items():
        row = metrics.row(wbc)
        if abs(row.precision - p) > tol or abs(row.recall - r) > tol:
            problems.append(f"P/R({wbc.name})")

    counts = EXPECTED_COUNTS[DatasetTag.RAABIN_TEST_B]
    cm = np.zeros((5, 5), dtype=np.int64)
    for wbc, n in counts.items():
        cm[int(wbc), int(WbcClass.NEUTROPHIL)] = n
    test_b = EvalResult.from_confusion(DatasetTag.RAABIN_TEST_B, cm)
    if round(test_b.accuracy, 1) != 93.0:
        problems.append(f"Test-B constant predictor {test_b.accuracy:.2f}")
    return CheckResult(
        "metrics-fidelity",
        not problems,
        "ok" if not problems else f"mismatches: {', '.join(problems)}",
        data={"test_b_constant_accuracy": test_b.accuracy},
    )


def check_ci_fidelity(n_lists: int = 1000, seed: int = 0) -> CheckResult:
    problems: List[str] = []
    ci = aggregate_ci([1.0, 2.0, 3.0])
    if abs(ci.mean - 2.0) > 5e-4 or abs((ci.half_width or 0) - 2.484) > 5e-4:
        problems.append(f"[1,2,3] -> {ci.mean:.3f}±{ci.half_width}")
    if aggregate_ci([97.5] * 10).half_width != 0.0:
        problems.append("all-equal input has nonzero width")

    rng = np.random.default_rng(seed)
    for _ in range(n_lists):
        values = rng.normal(90, 5, size=int(rng.integers(2, 12)))
        shift, scale = rng.uniform(-50, 50), rng.uniform(0.1, 10)
        base = aggregate_ci(values)
        moved = aggregate_ci(values + shift)
        scaled = aggregate_ci(values * scale)
        if not np.isclose(moved.mean, base.mean + shift) or not np.isclose(moved.half_width, base.half_width):
            problems.append("translation")
            break
        if not np.isclose(scaled.mean, base.mean * scale) or not np.isclose(scaled.half_width, base.half_width * scale):
            problems.append("scale")
            break
    return CheckResult("ci-fidelity", not problems, "ok" if not problems else ", ".join(problems))


def check_schedule_fidelity(steps_per_epoch: int = 50) -> CheckResult:
    cfg = TrainConfig()
    last = total_steps(steps_per_epoch, cfg)
    warm = cfg.warmup_epochs * steps_per_epoch
    mid = warm + cfg.decay_epochs * steps_per_epoch // 2
    problems: List[str] = []
    if lr_at(0, steps_per_epoch, cfg) != 0.0:
        problems.append("start")
    if lr_at(warm, steps_per_epoch, cfg) != cfg.peak_lr:
        problems.append("boundary")
    if abs(lr_at(mid, steps_per_epoch, cfg) - cfg.peak_lr / 2) > 1e-12:
        problems.append("midpoint")
    if lr_at(last, steps_per_epoch, cfg) > 1e-12:
        problems.append("end")
    grid = np.array([lr_at(s, steps_per_epoch, cfg) for s in range(last + 1)])
    max_jump = float(np.abs(np.diff(grid)).max())
    if max_jump > cfg.peak_lr / warm + 1e-15:
        problems.append(f"jump {max_jump:.2e}")
    if grid.min() < 0 or grid.max() != cfg.peak_lr or int(grid.argmax()) != warm:
        problems.append("range")
    return CheckResult("schedule-fidelity", not problems, "ok" if not problems else ", ".join(problems))


def check_frozen_bn_affine(seed: int = 0, tol: float = 1e-5) -> CheckResult:
    """Frozen BN layers act as the same fixed affine map in train and eval mode."""
    torch.manual_seed(seed)
    model = build_model(DESK_SPECS["desk-frozen"])
    layers = [m for m in model.modules() if isinstance(m, FrozenBatchNorm2d)]
    model.double().train()
    worst = 0.0
    for layer in layers:
        with torch.no_grad():
            layer.running_mean.uniform_(-1, 1)
            layer.running_var.uniform_(0.5, 2)
        xi = torch.randn(4, layer.num_features, 5, 5, dtype=torch.float64)
        train_out = layer(xi).detach().numpy()
        reference = batch_norm_forward(xi.numpy(), bn_state_from_module(layer), Mode.TRAIN)
        worst = max(worst, float(np.abs(train_out - reference).max()))
    return CheckResult(
        "frozen-bn-affine",
        worst <= tol,
        f"max deviation {worst:.2e} over {len(layers)} frozen layers",
    )


def check_determinism(manifest_dir: Path, env: Config, seed: int = 0) -> CheckResult:
    train_m, source_m, _ = _synthetic_pair(manifest_dir, n_train=20, n_test=10)
    cfg = TrainConfig.desk(warmup_epochs=1, decay_epochs=1)
    runs = [
        train(DESK_SPECS["desk-bn"], train_m, cfg, seed, [source_m], env=env, show_progress=False)
        for _ in range(2)
    ]
    a, b = (r.model_dump_json() for r in runs)
    return CheckResult("determinism", a == b, "identical RunResult JSON" if a == b else "RunResult JSON differs")


def _synthetic_pair(root: Path, n_train: int = 200, n_test: int = 100):
    return ensure_synthetic_pair(SynthConfig(root=root, n_per_class_train=n_train, n_per_class_test=n_test))


def synthetic_domain_experiment(
    out_dir: Path,
    seeds: Sequence[int] = range(5),
    env: Optional[Config] = None,
    cfg: Optional[TrainConfig] = None,
    jobs: int = 1,
    show_progress: bool = True,
) -> CheckResult:
    """Tiny CNN with BN, GN and frozen BN on the synthetic source/shifted pair."""
    env = env or load_config()
    cfg = cfg or TrainConfig.desk(device="cpu")
    train_m, source_m, shifted_m = _synthetic_pair(out_dir / "synth")
    store = ResultsStore(out_dir / "runs")

    summary: Dict[str, Dict[str, float]] = {}
    for key, spec in DESK_SPECS.items():
        runs = run_benchmark(
            spec, list(seeds), cfg, [source_m, shifted_m], train_m, store,
            jobs=jobs, env=env, show_progress=show_progress,
        )
        summary[key] = {
            tag.value: aggregate_ci([r.eval_results[tag.value].accuracy for r in runs]).mean
            for tag in (DatasetTag.SYNTH_SOURCE, DatasetTag.SYNTH_SHIFTED)
        }

    bn, gn = summary["desk-bn"], summary["desk-gn"]
    margin = gn[DatasetTag.SYNTH_SHIFTED.value] - bn[DatasetTag.SYNTH_SHIFTED.value]
    sources_ok = all(summary[k][DatasetTag.SYNTH_SOURCE.value] > SOURCE_FLOOR for k in ("desk-bn", "desk-gn"))
    passed = margin >= GN_MARGIN_POINTS and sources_ok
    return CheckResult(
        "synthetic-bn-vs-gn",
        passed,
        f"shifted accuracy GN {gn[DatasetTag.SYNTH_SHIFTED.value]:.2f} vs BN {bn[DatasetTag.SYNTH_SHIFTED.value]:.2f} "
        f"(margin {margin:.2f}, need {GN_MARGIN_POINTS}); source BN {bn[DatasetTag.SYNTH_SOURCE.value]:.2f}, "
        f"GN {gn[DatasetTag.SYNTH_SOURCE.value]:.2f}",
        data={"mean_accuracy": summary, "margin": margin},
    )


def run_desk_check(
    out_dir: Path,
    seeds: Sequence[int] = range(5),
    env: Optional[Config] = None,
    include_training: bool = True,
    jobs: int = 1,
) -> List[CheckResult]:
    env = env or load_config()
    suites: List[tuple] = [
        ("normalization-oracles", check_normalization_oracles),
        ("bn-shift-mechanism", check_bn_shift_mechanism),
        ("metrics-fidelity", check_metrics_fidelity),
        ("ci-fidelity", check_ci_fidelity),
        ("schedule-fidelity", check_schedule_fidelity),
        ("frozen-bn-affine", check_frozen_bn_affine),
    ]
    if include_training:
        suites += [
            ("determinism", lambda: check_determinism(out_dir / "determinism", env)),
            (
                "synthetic-bn-vs-gn",
                lambda: synthetic_domain_experiment(out_dir, seeds, env, jobs=jobs),
            ),
        ]
    results = [_timed(name, fn) for name, fn in suites]
    write_json(out_dir / "desk_check.json", [asdict(r) for r in results])
    return results
