"""Reference batch/group normalization and the frozen-BN layer.

The numpy functions define the exact train/eval semantics used throughout the
benchmark and act as oracles for the torch layers in the model zoo:

* batch statistics are taken over (N, H, W) per channel; normalization uses
  the biased batch variance, the running update uses the unbiased one;
* group normalization is stateless and identical in training and evaluation;
* a frozen BN state never mutates and behaves like evaluation mode.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import List

import numpy as np
import torch
from torch import nn

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1
DEFAULT_GN_GROUPS = 32


class Mode(str, Enum):
    TRAIN = "TRAIN"
    EVAL = "EVAL"


@dataclass
class BnState:
    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    momentum: float = DEFAULT_MOMENTUM
    eps: float = DEFAULT_EPS
    frozen: bool = False
    # Only meaningful when frozen; false leaves gamma/beta trainable.
    freeze_affine: bool = True

    def __post_init__(self) -> None:
        shapes = {a.shape for a in (self.running_mean, self.running_var, self.gamma, self.beta)}
        if len(shapes) != 1 or len(next(iter(shapes))) != 1:
            raise ValueError("BN state vectors must share one 1-D shape")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be nonnegative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")

    @classmethod
    def identity(cls, num_channels: int, **kwargs) -> "BnState":
        return cls(
            running_mean=np.zeros(num_channels),
            running_var=np.ones(num_channels),
            gamma=np.ones(num_channels),
            beta=np.zeros(num_channels),
            **kwargs,
        )

    @property
    def num_channels(self) -> int:
        return int(self.running_mean.shape[0])

    def trainable_parameters(self) -> List[str]:
        if self.frozen and self.freeze_affine:
            return []
        return ["gamma", "beta"]


@dataclass(frozen=True)
class GnParams:
    num_groups: int
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self) -> None:
        if self.num_groups <= 0:
            raise ValueError("num_groups must be positive")
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ValueError("gamma and beta must be matching 1-D vectors")
        if self.gamma.shape[0] % self.num_groups != 0:
            raise ValueError(
                f"{self.gamma.shape[0]} channels are not divisible into {self.num_groups} groups"
            )
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @classmethod
    def identity(cls, num_channels: int, num_groups: int = DEFAULT_GN_GROUPS, eps: float = DEFAULT_EPS) -> "GnParams":
        return cls(num_groups, np.ones(num_channels), np.zeros(num_channels), eps)


def _affine(y: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    return y * gamma[None, :, None, None] + beta[None, :, None, None]


def batch_norm_forward(x: np.ndarray, state: BnState, mode: Mode | str) -> np.ndarray:
    """Normalize ``x`` (N x C x H x W); TRAIN mode on an unfrozen state updates running stats."""
    mode = Mode(mode)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != state.num_channels:
        raise ValueError(f"expected N x {state.num_channels} x H x W input, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")

    if mode is Mode.TRAIN and not state.frozen:
        n, _, h, w = x.shape
        m = n * h * w
        if m < 2:
            raise ValueError("batch statistics need at least two values per channel in TRAIN mode")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        y = (x - mean[None, :, None, None]) / np.sqrt(var[None, :, None, None] + state.eps)
        unbiased = var * m / (m - 1)
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mean
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased
    else:
        y = (x - state.running_mean[None, :, None, None]) / np.sqrt(
            state.running_var[None, :, None, None] + state.eps
        )
    return _affine(y, state.gamma, state.beta)


def group_norm_forward(x: np.ndarray, params: GnParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    if c != params.gamma.shape[0]:
        raise ValueError(f"expected {params.gamma.shape[0]} channels, got {c}")
    grouped = x.reshape(n, params.num_groups, -1)
    mean = grouped.mean(axis=2, keepdims=True)
    var = grouped.var(axis=2, keepdims=True)
    y = ((grouped - mean) / np.sqrt(var + params.eps)).reshape(n, c, h, w)
    return _affine(y, params.gamma, params.beta)


def layer_norm_forward(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = DEFAULT_EPS
) -> np.ndarray:
    """Layer norm over (C, H, W): group norm with a single group."""
    return group_norm_forward(x, GnParams(1, np.asarray(gamma), np.asarray(beta), eps))


def instance_norm_forward(x: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    c = np.asarray(x).shape[1]
    return group_norm_forward(x, GnParams.identity(c, num_groups=c, eps=eps))


def freeze_bn_state(state: BnState, freeze_affine: bool = True) -> BnState:
    return replace(
        state,
        running_mean=state.running_mean.copy(),
        running_var=state.running_var.copy(),
        gamma=state.gamma.copy(),
        beta=state.beta.copy(),
        frozen=True,
        freeze_affine=freeze_affine,
    )


# --- torch layers ---


class FrozenBatchNorm2d(nn.BatchNorm2d):
    """BatchNorm2d pinned to evaluation behavior.

    ``train()`` never switches it to batch statistics, so its forward is the
    same affine map in both modes and its buffers never change. The affine
    parameters are excluded from training unless ``freeze_affine`` is false.
    """

    def __init__(self, num_features: int, eps: float = DEFAULT_EPS, momentum: float = DEFAULT_MOMENTUM, freeze_affine: bool = True) -> None:
        super().__init__(num_features, eps=eps, momentum=momentum, affine=True, track_running_stats=True)
        self.freeze_affine = freeze_affine
        self.weight.requires_grad_(not freeze_affine)
        self.bias.requires_grad_(not freeze_affine)
        self.training = False

    @classmethod
    def from_batchnorm(cls, bn: nn.BatchNorm2d, freeze_affine: bool = True) -> "FrozenBatchNorm2d":
        frozen = cls(bn.num_features, eps=bn.eps, momentum=bn.momentum or DEFAULT_MOMENTUM, freeze_affine=freeze_affine)
        with torch.no_grad():
            if bn.affine:
                frozen.weight.copy_(bn.weight)
                frozen.bias.copy_(bn.bias)
            if bn.running_mean is not None:
                frozen.running_mean.copy_(bn.running_mean)
                frozen.running_var.copy_(bn.running_var)
                frozen.num_batches_tracked.copy_(bn.num_batches_tracked)
        return frozen.to(bn.running_mean.device if bn.running_mean is not None else "cpu")

    def train(self, mode: bool = True) -> "FrozenBatchNorm2d":
        super().train(False)
        return self

    def extra_repr(self) -> str:
        return f"{super().extra_repr()}, frozen=True, freeze_affine={self.freeze_affine}"


def bn_state_from_module(bn: nn.BatchNorm2d) -> BnState:
    """Snapshot a torch BN layer as a reference state (float64 copies)."""
    def arr(t: torch.Tensor) -> np.ndarray:
        return t.detach().cpu().double().numpy().copy()

    return BnState(
        running_mean=arr(bn.running_mean),
        running_var=arr(bn.running_var),
        gamma=arr(bn.weight) if bn.affine else np.ones(bn.num_features),
        beta=arr(bn.bias) if bn.affine else np.zeros(bn.num_features),
        momentum=bn.momentum or DEFAULT_MOMENTUM,
        eps=bn.eps,
        frozen=isinstance(bn, FrozenBatchNorm2d),
        freeze_affine=getattr(bn, "freeze_affine", True),
    )


def gn_params_from_module(gn: nn.GroupNorm) -> GnParams:
    return GnParams(
        num_groups=gn.num_groups,
        gamma=gn.weight.detach().cpu().double().numpy().copy(),
        beta=gn.bias.detach().cpu().double().numpy().copy(),
        eps=gn.eps,
    )
