"""Training protocol and multi-seed benchmark runs.

One run: AdamW over the trainable parameters only, per-step warmup+cosine
schedule, flips as the sole augmentation, a fixed number of epochs with no
early stopping, then evaluation on every requested test manifest.
"""
from __future__ import annotations

import hashlib
import logging
import math
import multiprocessing
import os
import random
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from sklearn.utils.class_weight import compute_class_weight
from torch import nn
from torch.utils.data import DataLoader

from .classes import NUM_CLASSES, WbcClass
from .config import Config, ConfigurationError
from .datasets import DatasetManifest, ManifestError, PreprocessConfig, WbcDataset
from .evaluator import EvalResult, evaluate
from .modelzoo import ModelSpec, WbcModel, build_model, save_checkpoint
from .normalization import FrozenBatchNorm2d
from .progress import TrainProgress
from .schedule import WarmupCosineScheduler, lr_at

if TYPE_CHECKING:
    from .storage import ResultsStore

logger = logging.getLogger(__name__)

FULL_PROTOCOL_EPOCHS = 100


class NonFiniteLossError(RuntimeError):
    def __init__(self, seed: int, epoch: int, lr: float) -> None:
        super().__init__(f"non-finite training loss (seed={seed}, epoch={epoch}, lr={lr:.3e})")
        self.seed = seed
        self.epoch = epoch
        self.lr = lr


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    weight_decay: float = Field(default=0.005, ge=0.0)
    peak_lr: float = Field(default=1e-4, gt=0.0)
    warmup_epochs: int = Field(default=10, ge=0)
    decay_epochs: int = Field(default=90, gt=0)
    batch_size: int = Field(default=32, gt=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    augment: Literal["flips", "none"] = "flips"
    class_weighting: bool = False
    image_size: int = Field(default=224, gt=0)
    eval_batch_size: int = Field(default=64, gt=0)
    deterministic: bool = True
    device: str = "cpu"
    num_workers: int = Field(default=0, ge=0)

    @property
    def total_epochs(self) -> int:
        return self.warmup_epochs + self.decay_epochs

    @property
    def is_full_protocol(self) -> bool:
        return self.total_epochs == FULL_PROTOCOL_EPOCHS

    @classmethod
    def desk(cls, **overrides: Any) -> "TrainConfig":
        """Shortened schedule for the tiny CNN on synthetic 32px images."""
        values: Dict[str, Any] = dict(peak_lr=3e-3, warmup_epochs=2, decay_epochs=10, image_size=32)
        values.update(overrides)
        return cls(**values)

    def preprocess(self, training: bool) -> PreprocessConfig:
        return PreprocessConfig(target_size=self.image_size, train_augment=training and self.augment == "flips")


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    lr: float


class RunResult(BaseModel):
    seed: int
    spec: ModelSpec
    train_config: TrainConfig
    epoch_trace: List[EpochRecord]
    eval_results: Dict[str, EvalResult]
    environment: Dict[str, Any]
    frozen_checksum: Optional[str] = None
    # Kept out of the JSON so identical runs serialize identically.
    wall_time: float = Field(default=0.0, exclude=True)

    @model_validator(mode="after")
    def _check(self) -> "RunResult":
        if not self.eval_results:
            raise ValueError("a run needs at least one evaluation")
        if len(self.epoch_trace) != self.train_config.total_epochs:
            raise ValueError(
                f"epoch_trace has {len(self.epoch_trace)} entries, expected {self.train_config.total_epochs}"
            )
        return self


@dataclass
class FitOutcome:
    model: WbcModel
    epoch_trace: List[EpochRecord]
    wall_time: float
    frozen_checksum: Optional[str]


def seed_everything(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        # warn_only: some CUDA kernels (adaptive pooling backward) have no deterministic variant
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False
        torch.backends.cudnn.deterministic = True


def _seed_worker(worker_id: int) -> None:
    worker_seed = torch.initial_seed() % 2**32
    np.random.seed(worker_seed)
    random.seed(worker_seed)


def run_environment(cfg: TrainConfig) -> Dict[str, Any]:
    return {"device": cfg.device, "deterministic": cfg.deterministic, "torch": torch.__version__}


def frozen_state_checksum(model: nn.Module) -> Optional[str]:
    """sha256 over every excluded parameter and every frozen-BN buffer, or None if nothing is frozen."""
    digest = hashlib.sha256()
    found = False
    for name, p in model.named_parameters():
        if not p.requires_grad:
            digest.update(name.encode())
            digest.update(p.detach().cpu().numpy().tobytes())
            found = True
    for name, module in model.named_modules():
        if isinstance(module, FrozenBatchNorm2d):
            for bname, buf in module.named_buffers(recurse=False):
                digest.update(f"{name}.{bname}".encode())
                digest.update(buf.detach().cpu().numpy().tobytes())
                found = True
    return digest.hexdigest() if found else None


def _class_weights(manifest: DatasetManifest) -> torch.Tensor:
    labels = np.asarray([int(r.label) for r in manifest.records])
    missing = [c.name for c in WbcClass if manifest.class_counts[c] == 0]
    if missing:
        raise ManifestError(f"class weighting needs every class in training data; missing {', '.join(missing)}")
    weights = compute_class_weight("balanced", classes=np.arange(NUM_CLASSES), y=labels)
    return torch.tensor(weights, dtype=torch.float32)


def fit(
    spec: ModelSpec,
    train_manifest: DatasetManifest,
    cfg: TrainConfig,
    seed: int,
    env: Optional[Config] = None,
    gn_checkpoint: Optional[Path] = None,
    show_progress: bool = True,
) -> FitOutcome:
    if len(train_manifest) == 0:
        raise ManifestError("training manifest is empty")
    seed_everything(seed, cfg.deterministic)
    device = torch.device(cfg.device)

    model = build_model(spec, env, gn_checkpoint=gn_checkpoint).to(device)
    dataset = WbcDataset(train_manifest, cfg.preprocess(training=True), training=True, seed=seed)
    generator = torch.Generator()
    generator.manual_seed(seed)
    loader = DataLoader(
        dataset,
        batch_size=cfg.batch_size,
        shuffle=True,
        generator=generator,
        num_workers=cfg.num_workers,
        worker_init_fn=_seed_worker,
        # a trailing batch of one breaks batch statistics
        drop_last=len(dataset) % cfg.batch_size == 1,
    )
    steps_per_epoch = len(loader)

    params = model.trainable_parameters()
    optimizer = torch.optim.AdamW(params, lr=cfg.peak_lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    scheduler = WarmupCosineScheduler(optimizer, cfg, steps_per_epoch)
    weight = _class_weights(train_manifest).to(device) if cfg.class_weighting else None
    criterion = nn.CrossEntropyLoss(weight=weight)

    checksum_before = frozen_state_checksum(model)
    progress = TrainProgress(
        label=f"{spec.key} seed {seed}",
        total_epochs=cfg.total_epochs,
        steps_per_epoch=steps_per_epoch,
        enabled=show_progress,
    )
    logger.info(
        f"Training {spec.key} seed {seed}: {len(dataset)} images, {steps_per_epoch} steps/epoch, "
        f"{cfg.total_epochs} epochs, {sum(p.numel() for p in params):,} trainable parameters"
    )

    trace: List[EpochRecord] = []
    start = time.time()
    for epoch in range(cfg.total_epochs):
        dataset.set_epoch(epoch)
        model.train()
        progress.start_epoch(epoch)
        epoch_lr = lr_at(epoch * steps_per_epoch, steps_per_epoch, cfg)
        loss_sum, seen = 0.0, 0
        for images, labels in loader:
            lr = optimizer.param_groups[0]["lr"]
            images, labels = images.to(device), labels.to(device)
            optimizer.zero_grad(set_to_none=True)
            try:
                loss = criterion(model(images), labels)
                if not torch.isfinite(loss):
                    raise NonFiniteLossError(seed, epoch + 1, lr)
                loss.backward()
            except torch.cuda.OutOfMemoryError as err:
                raise ConfigurationError(
                    f"out of memory at batch_size={cfg.batch_size}; retry with --batch-size {max(cfg.batch_size // 2, 1)}"
                ) from err
            optimizer.step()
            scheduler.step()
            loss_sum += loss.item() * labels.shape[0]
            seen += labels.shape[0]
            progress.update(loss.item(), lr)
            progress.print_status()
        trace.append(EpochRecord(epoch=epoch + 1, train_loss=loss_sum / seen, lr=epoch_lr))
        if epoch == 0:
            logger.debug(f"first-epoch loss {trace[0].train_loss:.4f} (uniform guess: {math.log(NUM_CLASSES):.4f})")
    progress.print_summary()
    wall_time = time.time() - start

    checksum_after = frozen_state_checksum(model)
    if checksum_before != checksum_after:
        raise RuntimeError(f"{spec.key} seed {seed}: frozen parameters changed during training")
    return FitOutcome(model=model, epoch_trace=trace, wall_time=wall_time, frozen_checksum=checksum_after)


def train(
    spec: ModelSpec,
    train_manifest: DatasetManifest,
    cfg: TrainConfig,
    seed: int,
    test_sets: Sequence[DatasetManifest],
    env: Optional[Config] = None,
    gn_checkpoint: Optional[Path] = None,
    checkpoint_path: Optional[Path] = None,
    show_progress: bool = True,
) -> RunResult:
    """Train one seed, evaluate on ``test_sets`` and optionally checkpoint the final model."""
    if not test_sets:
        raise ValueError("train needs at least one test manifest")
    outcome = fit(spec, train_manifest, cfg, seed, env, gn_checkpoint, show_progress)
    eval_pre = cfg.preprocess(training=False)
    eval_results = {
        manifest.tag.value: evaluate(
            outcome.model, manifest, eval_pre, cfg.device, cfg.eval_batch_size, cfg.num_workers
        )
        for manifest in test_sets
    }
    if checkpoint_path is not None:
        save_checkpoint(outcome.model, checkpoint_path)
    return RunResult(
        seed=seed,
        spec=spec,
        train_config=cfg,
        epoch_trace=outcome.epoch_trace,
        eval_results=eval_results,
        environment=run_environment(cfg),
        frozen_checksum=outcome.frozen_checksum,
        wall_time=outcome.wall_time,
    )


def _train_and_store(
    spec: ModelSpec,
    train_manifest: DatasetManifest,
    cfg: TrainConfig,
    seed: int,
    test_sets: Sequence[DatasetManifest],
    store_root: Path,
    env: Optional[Config],
    gn_checkpoint: Optional[Path],
    argv: Optional[Sequence[str]],
    show_progress: bool,
) -> RunResult:
    from .storage import ResultsStore, build_provenance

    store = ResultsStore(store_root)
    result = train(
        spec,
        train_manifest,
        cfg,
        seed,
        test_sets,
        env=env,
        gn_checkpoint=gn_checkpoint,
        checkpoint_path=store.checkpoint_path(spec.key, seed),
        show_progress=show_progress,
    )
    provenance = build_provenance(
        {"spec": spec.model_dump(mode="json"), "train_config": cfg.model_dump(mode="json")},
        argv,
        cfg.device,
        cfg.deterministic,
        seed=seed,
        wall_time_s=round(result.wall_time, 3),
    )
    store.save(result, provenance)
    return result


def run_benchmark(
    spec: ModelSpec,
    seeds: Sequence[int],
    cfg: TrainConfig,
    test_sets: Sequence[DatasetManifest],
    train_manifest: DatasetManifest,
    store: "ResultsStore",
    jobs: int = 1,
    env: Optional[Config] = None,
    gn_checkpoint: Optional[Path] = None,
    argv: Optional[Sequence[str]] = None,
    show_progress: bool = True,
) -> List[RunResult]:
    """Train every seed not yet in ``store``; returns all results sorted by seed."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("seeds must be nonempty")
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"duplicate seeds: {sorted(s for s in set(seeds) if seeds.count(s) > 1)}")

    done = {s: store.load(spec.key, s) for s in seeds if store.has(spec.key, s)}
    pending = [s for s in seeds if s not in done]
    if done:
        logger.info(f"{spec.key}: resuming, {len(done)} of {len(seeds)} seeds already stored")

    common = (train_manifest, cfg)
    if jobs <= 1 or len(pending) <= 1:
        for seed in pending:
            done[seed] = _train_and_store(
                spec, *common, seed, test_sets, store.root, env, gn_checkpoint, argv, show_progress
            )
    else:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            futures = {
                pool.submit(
                    _train_and_store, spec, *common, seed, test_sets, store.root, env, gn_checkpoint, argv, False
                ): seed
                for seed in pending
            }
            for future in as_completed(futures):
                done[futures[future]] = future.result()

    return [done[s] for s in sorted(done)]
