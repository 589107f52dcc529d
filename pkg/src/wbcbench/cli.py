from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, Field, ValidationError, field_validator

from .analysis import build_tsne_figure, render_report_figures
from .checks import run_desk_check
from .classes import DATASET_ALIASES, DatasetTag, RaabinSplit
from .config import Config, ConfigurationError, ensure_writable_dir, load_config, load_experiment_file
from .datasets import DatasetManifest, ManifestError, read_manifest, scan_lisc, scan_raabin, write_manifest
from .evaluator import build_report, evaluate, per_class_metrics, select_representative_run, write_report
from .modelzoo import (
    DESK_SPECS,
    Base,
    ModelSpec,
    canonical_variant_id,
    load_checkpoint,
    pretrained_weights_cached,
    resolve_spec,
    variant_slug,
)
from .progress import SweepProgress
from .storage import ResultsStore, build_provenance, write_json
from .synthetic import SynthConfig, ensure_synthetic_pair
from .trainer import RunResult, TrainConfig, run_benchmark
from .weights import WeightsFetcher

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_VALIDATION = 3

DEFAULT_SEEDS = list(range(10))
DESK_IMAGE_SIZE = 32
MANIFEST_FILES = {
    DatasetTag.RAABIN_TRAIN: "raabin_train.csv",
    DatasetTag.RAABIN_TEST_A: "raabin_test_a.csv",
    DatasetTag.RAABIN_TEST_B: "raabin_test_b.csv",
    DatasetTag.LISC: "lisc.csv",
}


class NoResultsError(Exception):
    pass


class ExperimentConfig(BaseModel):
    tier: Literal["DESK", "FULL"] = "DESK"
    raabin_root: Optional[Path] = None
    lisc_root: Optional[Path] = None
    variants: List[str] = Field(default_factory=list)
    seeds: List[int] = Field(default_factory=lambda: list(DEFAULT_SEEDS))
    train: TrainConfig = Field(default_factory=TrainConfig)
    out_dir: Path = Path("runs")
    jobs: int = Field(default=1, ge=1)

    @field_validator("variants")
    @classmethod
    def _known_variants(cls, value: List[str]) -> List[str]:
        return [v if v in DESK_SPECS else canonical_variant_id(v) for v in value]

    @field_validator("seeds")
    @classmethod
    def _distinct_seeds(cls, value: List[int]) -> List[int]:
        if not value:
            raise ValueError("seeds must be nonempty")
        if len(set(value)) != len(value):
            raise ValueError("seeds must be distinct")
        return value

    def specs(self) -> List[ModelSpec]:
        return [resolve_spec(v) for v in self.variants]


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        _emit_error("UsageError", message, EXIT_USAGE)
        raise SystemExit(EXIT_USAGE)


def _emit_error(kind: str, message: str, code: int) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")


def parse_seeds(text: str) -> List[int]:
    """``0..9`` (inclusive), ``0,3,5`` or a single seed."""
    text = text.strip()
    if ".." in text:
        lo, hi = (int(p) for p in text.split("..", 1))
        if hi < lo:
            raise argparse.ArgumentTypeError(f"empty seed range {text}")
        return list(range(lo, hi + 1))
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}") from None


def parse_variants(text: str) -> List[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def setup_logging(out_dir: Optional[Path], verbose: bool = False) -> None:
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if out_dir is not None:
        log_dir = ensure_writable_dir(out_dir / "logs")
        handlers.append(logging.FileHandler(log_dir / "wbcbench.log"))
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(message)s",
        handlers=handlers,
        force=True,
    )


# --- experiment resolution ---


def resolve_experiment(args: argparse.Namespace, env: Config) -> ExperimentConfig:
    """Merge settings: CLI flag > experiment.json > environment > default."""
    payload: Dict[str, Any] = {"raabin_root": env.raabin_root, "lisc_root": env.lisc_root}
    if getattr(args, "config", None):
        payload.update(load_experiment_file(Path(args.config)))

    for key in ("tier", "variants", "seeds", "out", "jobs"):
        value = getattr(args, key, None)
        if value is not None:
            payload["out_dir" if key == "out" else key] = value.upper() if key == "tier" else value
    if getattr(args, "variant", None):
        payload["variants"] = [args.variant]

    tier = payload.get("tier", "DESK")
    base_train = TrainConfig.desk() if tier == "DESK" else TrainConfig()
    train_values: Dict[str, Any] = {**base_train.model_dump(), "device": env.device, "num_workers": env.num_workers}
    train_values.update(payload.pop("train", {}) or {})
    for flag, field_name in (("batch_size", "batch_size"), ("device", "device"), ("deterministic", "deterministic"),
                             ("class_weighting", "class_weighting")):
        value = getattr(args, flag, None)
        if value is not None:
            train_values[field_name] = value
    payload["train"] = train_values

    exp = ExperimentConfig.model_validate(payload)
    _check_tier(exp, env)
    return exp


def _check_tier(exp: ExperimentConfig, env: Config) -> None:
    # ViT-B/16 position embeddings are fixed to a 14x14 patch grid
    too_small = [s.key for s in exp.specs() if s.base is Base.VIT_B16 and exp.train.image_size != 224]
    if too_small:
        raise ConfigurationError(
            f"{', '.join(too_small)} needs 224px inputs, got {exp.train.image_size}px"
            + (" (DESK tier trains at 32px; use --tier full)" if exp.tier == "DESK" else "")
        )
    if exp.tier != "DESK":
        return
    missing = [s.key for s in exp.specs() if not pretrained_weights_cached(s, env)]
    if missing:
        raise ConfigurationError(
            f"DESK tier cannot download weights; not cached for {', '.join(missing)}. "
            "Use --tier full (downloads into WBC_WEIGHTS_CACHE) or `wbcbench prepare --fetch-gn-weights` for GN variants."
        )


def _write_provenance(out_dir: Path, command: str, exp: Optional[ExperimentConfig], argv: Sequence[str]) -> None:
    path = out_dir / "provenance.json"
    existing: Dict[str, Any] = {}
    if path.exists():
        try:
            existing = json.loads(path.read_text())
        except json.JSONDecodeError:
            logger.warning(f"replacing unreadable {path}")
    config = exp.model_dump(mode="json") if exp is not None else {}
    device = exp.train.device if exp is not None else "cpu"
    deterministic = exp.train.deterministic if exp is not None else True
    existing[command] = build_provenance(config, argv, device, deterministic)
    write_json(path, existing)


# --- dataset plumbing ---


def _synth_manifests(env: Config) -> Tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    return ensure_synthetic_pair(SynthConfig(root=env.synth_cache))


def _full_manifest(tag: DatasetTag, exp: ExperimentConfig) -> DatasetManifest:
    cached = exp.out_dir / "manifests" / MANIFEST_FILES[tag]
    if cached.exists():
        return read_manifest(cached)
    if tag is DatasetTag.LISC:
        if exp.lisc_root is None:
            raise ConfigurationError("LISC root not configured (set WBC_LISC_ROOT or lisc_root)")
        return scan_lisc(exp.lisc_root)
    if exp.raabin_root is None:
        raise ConfigurationError("RaabinWBC root not configured (set WBC_RAABIN_ROOT or raabin_root)")
    split = {
        DatasetTag.RAABIN_TRAIN: RaabinSplit.TRAIN,
        DatasetTag.RAABIN_TEST_A: RaabinSplit.TEST_A,
        DatasetTag.RAABIN_TEST_B: RaabinSplit.TEST_B,
    }[tag]
    return scan_raabin(exp.raabin_root, split)


def manifest_for(tag: DatasetTag, exp: ExperimentConfig, env: Config) -> DatasetManifest:
    if tag is DatasetTag.SYNTH_SOURCE:
        return _synth_manifests(env)[1]
    if tag is DatasetTag.SYNTH_SHIFTED:
        return _synth_manifests(env)[2]
    return _full_manifest(tag, exp)


def training_sets(exp: ExperimentConfig, env: Config) -> Tuple[DatasetManifest, List[DatasetManifest]]:
    if exp.tier == "DESK":
        train_m, source_m, shifted_m = _synth_manifests(env)
        return train_m, [source_m, shifted_m]
    train_m = _full_manifest(DatasetTag.RAABIN_TRAIN, exp)
    tests = [_full_manifest(t, exp) for t in (DatasetTag.RAABIN_TEST_A, DatasetTag.RAABIN_TEST_B, DatasetTag.LISC)]
    return train_m, tests


def _run_variants(exp: ExperimentConfig, env: Config, argv: Sequence[str]) -> Tuple[Dict[str, List[RunResult]], List[str]]:
    train_m, tests = training_sets(exp, env)
    store = ResultsStore(exp.out_dir)
    progress = SweepProgress(total_runs=len(exp.variants) * len(exp.seeds))
    results: Dict[str, List[RunResult]] = {}
    failed: List[str] = []
    for spec in exp.specs():
        progress.begin(spec.key)
        progress.print_status()
        before = sum(store.has(spec.key, s) for s in exp.seeds)
        try:
            results[spec.key] = run_benchmark(
                spec, exp.seeds, exp.train, tests, train_m, store,
                jobs=exp.jobs, env=env, argv=argv,
            )
            progress.update(done=len(exp.seeds) - before, skipped=before)
        except Exception as exc:
            logger.error(f"variant {spec.key} failed: {type(exc).__name__}: {exc}")
            failed.append(spec.key)
            progress.update(failed=len(exp.seeds) - before, skipped=before)
    progress.print_summary()
    return results, failed


def _image_size_for(spec: ModelSpec) -> int:
    return DESK_IMAGE_SIZE if spec.base is Base.TINY_CNN else 224


# --- subcommands ---


def cmd_prepare(args: argparse.Namespace) -> int:
    env = load_config()
    exp = resolve_experiment(args, env)
    out = ensure_writable_dir(exp.out_dir)
    did_something = False

    if args.synthetic or exp.tier == "DESK":
        train_m, source_m, shifted_m = _synth_manifests(env)
        print(f"synthetic pair: {len(train_m)} train, {len(source_m)} source test, {len(shifted_m)} shifted test")
        did_something = True

    if exp.raabin_root is not None:
        for split in RaabinSplit:
            manifest = scan_raabin(exp.raabin_root, split)
            write_manifest(manifest, out / "manifests" / MANIFEST_FILES[split.tag])
            print(f"{split.tag.value}: {len(manifest)} images")
        did_something = True
    if exp.lisc_root is not None:
        manifest = scan_lisc(exp.lisc_root)
        write_manifest(manifest, out / "manifests" / MANIFEST_FILES[DatasetTag.LISC])
        print(f"LISC: {len(manifest)} images")
        did_something = True

    if args.fetch_gn_weights:
        path = WeightsFetcher(env).fetch(env.gn_weights_url, env.gn_weights_sha256)
        print(f"GN weights: {path}")
        did_something = True

    if not did_something:
        raise ConfigurationError("nothing to prepare: configure dataset roots, --synthetic or --fetch-gn-weights")
    _write_provenance(out, "prepare", exp, args.argv)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    env = load_config()
    exp = resolve_experiment(args, env)
    ensure_writable_dir(exp.out_dir)
    _write_provenance(exp.out_dir, "train", exp, args.argv)
    results, failed = _run_variants(exp, env, args.argv)
    for key, runs in results.items():
        for run in runs:
            accs = ", ".join(f"{k} {v.accuracy:.2f}" for k, v in sorted(run.eval_results.items()))
            print(f"{key} seed {run.seed}: {accs}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    env = load_config()
    exp = resolve_experiment(args, env)
    out = ensure_writable_dir(exp.out_dir)
    tag = DATASET_ALIASES[args.dataset]
    model = load_checkpoint(Path(args.checkpoint), map_location=exp.train.device).to(exp.train.device)
    preprocess = TrainConfig(image_size=_image_size_for(model.spec)).preprocess(training=False)
    result = evaluate(model, manifest_for(tag, exp, env), preprocess, exp.train.device, exp.train.eval_batch_size)

    write_json(out / f"eval_{tag.value}.json", result.model_dump(mode="json"))
    print(f"{model.spec.key} on {tag.value}: {result.accuracy:.2f}% over {result.n} images")
    print(per_class_metrics(result.confusion).to_frame().to_string())
    if result.absent_classes:
        print(f"absent classes: {', '.join(result.absent_classes)}; majority baseline {result.majority_baseline:.2f}%")
    _write_provenance(out, "evaluate", exp, args.argv)
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    env = load_config()
    exp = resolve_experiment(args, env)
    if not exp.variants:
        raise ValueError("no variants requested")
    ensure_writable_dir(exp.out_dir)
    _write_provenance(exp.out_dir, "ablate", exp, args.argv)
    results, failed = _run_variants(exp, env, args.argv)
    if not results:
        raise RuntimeError(f"every variant failed: {', '.join(failed)}")
    report = build_report(results)
    write_report(report, exp.out_dir)
    render_report_figures(results, exp.out_dir / "figures")
    print(report.comparison.to_text())
    if failed:
        print(f"failed variants: {', '.join(failed)}")
    return EXIT_RUNTIME if failed else EXIT_OK


def _load_results(directory: Path) -> Dict[str, List[RunResult]]:
    results = ResultsStore(directory).load_all()
    if not results:
        raise NoResultsError(f"no run results found in {directory}")
    return results


def cmd_report(args: argparse.Namespace) -> int:
    env = load_config()
    exp = resolve_experiment(args, env)
    in_dir = Path(args.in_dir) if args.in_dir else exp.out_dir
    results = _load_results(in_dir)
    out = ensure_writable_dir(Path(args.out) if args.out else in_dir)
    report = build_report(results)
    write_report(report, out)
    if not args.no_figures:
        render_report_figures(results, out / "figures")
    print(report.comparison.to_text())
    _write_provenance(out, "report", exp, args.argv)
    return EXIT_OK


def _representative_checkpoint(in_dir: Path, variant: str, dataset: DatasetTag) -> Path:
    results = _load_results(in_dir)
    key = variant if variant in DESK_SPECS else canonical_variant_id(variant)
    if key not in results:
        raise NoResultsError(f"no run results found for {key} in {in_dir}")
    run = select_representative_run(results[key], dataset)
    logger.info(f"{key}: using seed {run.seed}, closest to the mean on {dataset.value}")
    return ResultsStore(in_dir).checkpoint_path(key, run.seed)


def cmd_analyze(args: argparse.Namespace) -> int:
    env = load_config()
    exp = resolve_experiment(args, env)
    out = ensure_writable_dir(exp.out_dir)
    in_dir = Path(args.in_dir) if args.in_dir else exp.out_dir

    if args.figure == "tsne":
        desk = exp.tier == "DESK"
        first, second = (
            (DatasetTag.SYNTH_SOURCE, DatasetTag.SYNTH_SHIFTED) if desk else (DatasetTag.RAABIN_TEST_A, DatasetTag.LISC)
        )
        if args.checkpoint:
            checkpoint = Path(args.checkpoint)
        elif args.variant:
            checkpoint = _representative_checkpoint(in_dir, args.variant, second)
        else:
            raise ValueError("analyze --figure tsne needs --checkpoint or --variant")
        model = load_checkpoint(checkpoint, map_location=exp.train.device).to(exp.train.device)
        preprocess = TrainConfig(image_size=_image_size_for(model.spec)).preprocess(training=False)
        embedding = build_tsne_figure(
            model,
            manifest_for(first, exp, env),
            manifest_for(second, exp, env),
            n_per_class=args.n_per_class,
            seed=args.seed,
            out_dir=out / "tsne" / variant_slug(model.spec.key),
            preprocess=preprocess,
            device=exp.train.device,
        )
        print(f"t-SNE: {len(embedding)} points, cross-domain ratio {embedding.cross_domain_ratio}")
    else:
        results = _load_results(in_dir)
        written = render_report_figures(results, out, figures=(args.figure,))
        print(f"wrote {len(written)} files")
    _write_provenance(out, "analyze", exp, args.argv)
    return EXIT_OK


def cmd_desk_check(args: argparse.Namespace) -> int:
    env = load_config()
    out = ensure_writable_dir(Path(args.out or "runs/desk-check"))
    results = run_desk_check(out, seeds=args.seeds or list(range(5)), env=env, include_training=not args.quick, jobs=args.jobs or 1)
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name} ({r.seconds:.1f}s): {r.detail}")
    _write_provenance(out, "desk-check", None, args.argv)
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


# --- parser ---


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", type=Path, default=None, help="output directory (default: runs)")
    parser.add_argument("--config", default=None, help="experiment.json with defaults for this run")
    parser.add_argument("--tier", choices=["desk", "full"], default=None)
    parser.add_argument("--device", default=None)
    parser.add_argument("--verbose", action="store_true")


def _training(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seeds", type=parse_seeds, default=None, help="e.g. 0..9 or 0,3,5")
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--class-weighting", action=argparse.BooleanOptionalAction, default=None)
    parser.add_argument("--jobs", type=int, default=None, help="parallel seeds (processes)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wbcbench")
    subparsers = parser.add_subparsers(dest="command", required=True)

    cmd = subparsers.add_parser("prepare", help="Scan datasets, render the synthetic pair, fetch weights")
    _common(cmd)
    cmd.add_argument("--synthetic", action="store_true")
    cmd.add_argument("--fetch-gn-weights", action="store_true")
    cmd.set_defaults(func=cmd_prepare)

    cmd = subparsers.add_parser("train", help="Train one variant over seeds")
    _common(cmd)
    _training(cmd)
    cmd.add_argument("--variant", required=True, help="a, a', b, b', i, ii, iii, c, d or desk-bn/desk-gn/desk-frozen")
    cmd.set_defaults(func=cmd_train)

    cmd = subparsers.add_parser("evaluate", help="Evaluate a checkpoint on one dataset")
    _common(cmd)
    cmd.add_argument("--checkpoint", required=True)
    cmd.add_argument("--dataset", required=True, choices=sorted(DATASET_ALIASES))
    cmd.set_defaults(func=cmd_evaluate)

    cmd = subparsers.add_parser("ablate", help="Train and compare several variants")
    _common(cmd)
    _training(cmd)
    cmd.add_argument("--variants", type=parse_variants, required=True, help="comma separated, e.g. a,a',b,i")
    cmd.set_defaults(func=cmd_ablate)

    cmd = subparsers.add_parser("analyze", help="t-SNE and report figures")
    _common(cmd)
    cmd.add_argument("--figure", choices=["tsne", "box", "bars", "confusion"], required=True)
    cmd.add_argument("--checkpoint", default=None)
    cmd.add_argument("--variant", default=None, help="pick the mean-closest seed of this variant")
    cmd.add_argument("--in", dest="in_dir", default=None, help="results directory (default: --out)")
    cmd.add_argument("--n-per-class", type=int, default=39)
    cmd.add_argument("--seed", type=int, default=0)
    cmd.set_defaults(func=cmd_analyze)

    cmd = subparsers.add_parser("report", help="Rebuild report files from stored results")
    _common(cmd)
    cmd.add_argument("--in", dest="in_dir", default=None, help="results directory (default: --out)")
    cmd.add_argument("--no-figures", action="store_true")
    cmd.set_defaults(func=cmd_report)

    cmd = subparsers.add_parser("desk-check", help="Run the CPU oracle suites and the synthetic experiment")
    cmd.add_argument("--out", default=None)
    cmd.add_argument("--seeds", type=parse_seeds, default=None)
    cmd.add_argument("--jobs", type=int, default=None)
    cmd.add_argument("--quick", action="store_true", help="skip suites that train models")
    cmd.add_argument("--verbose", action="store_true")
    cmd.set_defaults(func=cmd_desk_check)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv

    out = getattr(args, "out", None)
    try:
        setup_logging(Path(out) if out else None, verbose=args.verbose)
        return args.func(args)
    except (NoResultsError, ConfigurationError, ManifestError, ValidationError, ValueError) as exc:
        _emit_error(type(exc).__name__, str(exc), EXIT_VALIDATION)
        return EXIT_VALIDATION
    except KeyboardInterrupt:
        _emit_error("KeyboardInterrupt", "interrupted", EXIT_RUNTIME)
        return EXIT_RUNTIME
    except Exception as exc:
        logger.exception("unhandled error")
        _emit_error(type(exc).__name__, str(exc), EXIT_RUNTIME)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
