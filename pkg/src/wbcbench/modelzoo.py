"""Model variants and model surgery.

Every benchmark variant is described by a :class:`ModelSpec` and built by
:func:`build_model`, which starts from a torchvision architecture and then
applies the surgery steps the ModelSpec asks for: a fresh 5-way head, an optional
VGG-style fully-connected head, BN->GN replacement and freeze policies.
"""
from __future__ import annotations

import logging
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import nn
from torchvision import models as tv_models

from .classes import NUM_CLASSES
from .config import Config, ConfigurationError, load_config
from .normalization import DEFAULT_GN_GROUPS, FrozenBatchNorm2d
from .weights import WeightsFetcher, load_gn_state_dict, use_weights_cache

logger = logging.getLogger(__name__)

VGG_FC_WIDTH = 4096


class Base(str, Enum):
    RESNET50 = "RESNET50"
    VGG16 = "VGG16"
    VGG16_BN = "VGG16_BN"
    VIT_B16 = "VIT_B16"
    CONVNEXT_TINY = "CONVNEXT_TINY"
    TINY_CNN = "TINY_CNN"


class NormStrategy(str, Enum):
    DEFAULT = "DEFAULT"
    REPLACE_BN_WITH_GN = "REPLACE_BN_WITH_GN"
    FREEZE_BN = "FREEZE_BN"


class Head(str, Enum):
    LINEAR = "LINEAR"
    VGG_FC = "VGG_FC"


class SurgeryError(ValueError):
    pass


# Table order of the published comparison.
VARIANT_ORDER: Tuple[str, ...] = ("a", "a'", "i", "ii", "iii", "b", "b'", "c", "d")

VARIANT_TABLE: Dict[str, Dict[str, object]] = {
    "a": dict(base=Base.RESNET50, norm_strategy=NormStrategy.DEFAULT, head=Head.LINEAR, trainable_last_k=None),
    "a'": dict(base=Base.RESNET50, norm_strategy=NormStrategy.DEFAULT, head=Head.VGG_FC, trainable_last_k=None),
    "b": dict(base=Base.VGG16, norm_strategy=NormStrategy.DEFAULT, head=Head.VGG_FC, trainable_last_k=None),
    "b'": dict(base=Base.VGG16_BN, norm_strategy=NormStrategy.DEFAULT, head=Head.VGG_FC, trainable_last_k=None),
    "i": dict(base=Base.RESNET50, norm_strategy=NormStrategy.REPLACE_BN_WITH_GN, head=Head.LINEAR, trainable_last_k=None),
    "ii": dict(base=Base.RESNET50, norm_strategy=NormStrategy.FREEZE_BN, head=Head.LINEAR, trainable_last_k=None),
    "iii": dict(base=Base.RESNET50, norm_strategy=NormStrategy.FREEZE_BN, head=Head.LINEAR, trainable_last_k=16),
    "c": dict(base=Base.VIT_B16, norm_strategy=NormStrategy.DEFAULT, head=Head.LINEAR, trainable_last_k=None),
    "d": dict(base=Base.CONVNEXT_TINY, norm_strategy=NormStrategy.DEFAULT, head=Head.LINEAR, trainable_last_k=None),
}

VARIANT_DESCRIPTIONS: Dict[str, str] = {
    "a": "Default ResNet50 (has batch norm; no fully-connected layers)",
    "a'": "ResNet50 (has batch norm; add fully-connected layers)",
    "i": "ResNet50 (replace batch norm with group norm; no fully-connected layers)",
    "ii": "ResNet50 (freeze batch norm; no fully-connected layers)",
    "iii": "ResNet50 (freeze batch norm; no fully-connected layers; fine-tune last 16 layers only)",
    "b": "Default VGG16 (no batch norm; has fully-connected layers)",
    "b'": "VGG16 (add batch norm; has fully-connected layers)",
    "c": "ViT-Base-16 (use layer norm instead of batch norm)",
    "d": "ConvNeXt-Tiny (use layer norm instead of batch norm)",
}

# Published mean±CI targets per variant and test set. Where the main table and
# the supplementary table disagree, both entries are kept.
PUBLISHED_TARGETS: Dict[str, Dict[str, List[Tuple[float, float]]]] = {
    "a": {"RAABIN_TEST_A": [(98.53, 0.18)], "LISC": [(23.11, 3.04)]},
    "a'": {"RAABIN_TEST_A": [(98.45, 0.19), (98.46, 0.19)], "LISC": [(27.74, 3.44)]},
    "i": {"RAABIN_TEST_A": [(98.24, 0.14)], "LISC": [(73.07, 2.07)]},
    "ii": {"RAABIN_TEST_A": [(98.94, 0.06)], "LISC": [(51.48, 7.14)]},
    "iii": {"RAABIN_TEST_A": [(98.67, 0.12)], "LISC": [(74.28, 2.48), (74.24, 2.46)]},
    "b": {"RAABIN_TEST_A": [(98.75, 0.06)], "LISC": [(74.44, 2.72)]},
    "b'": {"RAABIN_TEST_A": [(98.68, 0.23), (98.64, 0.18)], "LISC": [(33.74, 8.04), (32.33, 6.17)]},
    "c": {"RAABIN_TEST_A": [(98.33, 0.14)], "LISC": [(69.77, 3.09)]},
    "d": {"RAABIN_TEST_A": [(98.83, 0.09)], "LISC": [(67.35, 2.51)]},
}

_BN_BASES = {Base.RESNET50, Base.VGG16_BN, Base.TINY_CNN}
_LAYER_NORM_BASES = {Base.VIT_B16, Base.CONVNEXT_TINY}


def canonical_variant_id(value: str) -> str:
    vid = value.strip().replace("′", "'").replace("_prime", "'").lower()
    if vid not in VARIANT_TABLE:
        raise ValueError(f"unknown variant {value!r}; expected one of {', '.join(VARIANT_ORDER)}")
    return vid


def variant_slug(key: str) -> str:
    """Filesystem-safe spelling of a run key (``a'`` -> ``a_prime``)."""
    return key.replace("'", "_prime")


class ModelSpec(BaseModel):
    model_config = ConfigDict(frozen=True, use_enum_values=False)

    base: Base
    norm_strategy: NormStrategy = NormStrategy.DEFAULT
    head: Head = Head.LINEAR
    trainable_last_k: Optional[int] = Field(default=None, gt=0)
    num_classes: int = NUM_CLASSES
    pretrained: bool = True
    variant_id: Optional[str] = None
    name: Optional[str] = None
    gn_groups: int = Field(default=DEFAULT_GN_GROUPS, gt=0)
    freeze_affine: bool = True
    fc_dropout: float = Field(default=0.5, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_consistency(self) -> "ModelSpec":
        if self.num_classes != NUM_CLASSES:
            raise ValueError(f"num_classes must be {NUM_CLASSES}")
        if self.norm_strategy is NormStrategy.REPLACE_BN_WITH_GN and self.base not in {Base.RESNET50, Base.TINY_CNN}:
            raise ValueError("REPLACE_BN_WITH_GN requires RESNET50 (GN-pretrained weights exist only there)")
        if self.norm_strategy is NormStrategy.FREEZE_BN and self.base not in _BN_BASES:
            raise ValueError(f"{self.base.value} has no batch norm to freeze")
        if self.base in {Base.VGG16, Base.VGG16_BN} and self.head is not Head.VGG_FC:
            raise ValueError("VGG bases always carry the VGG_FC head")
        if self.base in _LAYER_NORM_BASES and (
            self.norm_strategy is not NormStrategy.DEFAULT or self.head is not Head.LINEAR or self.trainable_last_k
        ):
            raise ValueError(f"{self.base.value} only supports the default configuration with a linear head")
        if self.base is Base.TINY_CNN and self.head is not Head.LINEAR:
            raise ValueError("TINY_CNN only supports a linear head")
        if self.variant_id is not None:
            vid = canonical_variant_id(self.variant_id)
            if vid != self.variant_id:
                raise ValueError(f"variant_id must be spelled {vid!r}")
            expected = VARIANT_TABLE[vid]
            for field_name, value in expected.items():
                if getattr(self, field_name) != value:
                    raise ValueError(
                        f"variant {vid} requires {field_name}={_show(value)}, got {_show(getattr(self, field_name))}"
                    )
        return self

    @classmethod
    def for_variant(cls, variant_id: str, **overrides) -> "ModelSpec":
        vid = canonical_variant_id(variant_id)
        return cls(variant_id=vid, **{**VARIANT_TABLE[vid], **overrides})

    @property
    def key(self) -> str:
        return self.variant_id or self.name or f"{self.base.value.lower()}-{self.norm_strategy.value.lower()}"


def _show(value: object) -> str:
    return value.value if isinstance(value, Enum) else repr(value)


DESK_SPECS: Dict[str, ModelSpec] = {
    "desk-bn": ModelSpec(base=Base.TINY_CNN, pretrained=False, name="desk-bn"),
    "desk-gn": ModelSpec(
        base=Base.TINY_CNN,
        norm_strategy=NormStrategy.REPLACE_BN_WITH_GN,
        gn_groups=8,
        pretrained=False,
        name="desk-gn",
    ),
    "desk-frozen": ModelSpec(
        base=Base.TINY_CNN, norm_strategy=NormStrategy.FREEZE_BN, pretrained=False, name="desk-frozen"
    ),
}


def resolve_spec(key: str) -> ModelSpec:
    if key in DESK_SPECS:
        return DESK_SPECS[key]
    return ModelSpec.for_variant(key)


class TinyCnn(nn.Module):
    """Three conv/BN/ReLU stages, global pooling, linear head."""

    def __init__(self, num_classes: int = NUM_CLASSES, widths: Tuple[int, ...] = (16, 32, 64)) -> None:
        super().__init__()
        layers: List[nn.Module] = []
        in_ch = 3
        for i, width in enumerate(widths):
            layers += [
                nn.Conv2d(in_ch, width, kernel_size=3, padding=1, bias=False),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
            ]
            if i < len(widths) - 1:
                layers.append(nn.MaxPool2d(2))
            in_ch = width
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(in_ch, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(torch.flatten(self.pool(self.features(x)), 1))


class WbcModel(nn.Module):
    """A torchvision (or tiny) network plus the bookkeeping surgery needs."""

    def __init__(self, spec: ModelSpec, net: nn.Module, feature_tap: str, head_kind: Head) -> None:
        super().__init__()
        self.spec = spec
        self.net = net
        self.feature_tap = feature_tap
        self.head_kind = head_kind

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def weight_layers(self) -> List[Tuple[str, nn.Module]]:
        return [(name, m) for name, m in self.net.named_modules() if isinstance(m, (nn.Conv2d, nn.Linear))]

    def trainable_mask(self) -> Dict[str, bool]:
        return {name: p.requires_grad for name, p in self.named_parameters()}

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]


# name -> (constructor, weights enum, classifier path)
_TORCHVISION: Dict[Base, Tuple[Callable[..., nn.Module], object, str]] = {
    Base.RESNET50: (tv_models.resnet50, tv_models.ResNet50_Weights.IMAGENET1K_V1, "fc"),
    Base.VGG16: (tv_models.vgg16, tv_models.VGG16_Weights.IMAGENET1K_V1, "classifier.6"),
    Base.VGG16_BN: (tv_models.vgg16_bn, tv_models.VGG16_BN_Weights.IMAGENET1K_V1, "classifier.6"),
    Base.VIT_B16: (tv_models.vit_b_16, tv_models.ViT_B_16_Weights.IMAGENET1K_V1, "heads.head"),
    Base.CONVNEXT_TINY: (tv_models.convnext_tiny, tv_models.ConvNeXt_Tiny_Weights.IMAGENET1K_V1, "classifier.2"),
}


def pretrained_weights_cached(spec: ModelSpec, cfg: Config) -> bool:
    """True if building ``spec`` needs no download."""
    if not spec.pretrained or spec.base is Base.TINY_CNN:
        return True
    if spec.norm_strategy is NormStrategy.REPLACE_BN_WITH_GN:
        return WeightsFetcher(cfg).cached_path(cfg.gn_weights_url).exists()
    _, weights, _ = _TORCHVISION[spec.base]
    return (cfg.weights_cache / "hub" / "checkpoints" / weights.url.rsplit("/", 1)[-1]).exists()


def _set_submodule(root: nn.Module, path: str, module: nn.Module) -> None:
    parent_path, _, attr = path.rpartition(".")
    parent = root.get_submodule(parent_path) if parent_path else root
    setattr(parent, attr, module)


def _base_network(spec: ModelSpec, cfg: Config) -> Tuple[nn.Module, str]:
    if spec.base is Base.TINY_CNN:
        return TinyCnn(num_classes=spec.num_classes), "fc"

    ctor, weights, head_path = _TORCHVISION[spec.base]
    # GN variants take every weight from the GN checkpoint.
    load_imagenet = spec.pretrained and spec.norm_strategy is not NormStrategy.REPLACE_BN_WITH_GN
    if not load_imagenet:
        return ctor(weights=None), head_path

    use_weights_cache(cfg)
    try:
        net = ctor(weights=weights)
    except Exception as exc:
        raise ConfigurationError(
            f"ImageNet weights for {spec.base.value} are unavailable ({exc}). Download "
            f"{weights.url} into {cfg.weights_cache / 'hub' / 'checkpoints'} and rerun."
        ) from exc
    return net, head_path


def build_model(
    spec: ModelSpec, cfg: Optional[Config] = None, gn_checkpoint: Optional[Path] = None
) -> WbcModel:
    """Construct the network described by ``spec``, surgery included.

    The classifier head is always freshly initialized for five classes, so
    callers should seed torch first.
    """
    cfg = cfg or load_config()
    net, head_path = _base_network(spec, cfg)

    old_head = net.get_submodule(head_path)
    _set_submodule(net, head_path, nn.Linear(old_head.in_features, spec.num_classes))
    head_kind = Head.VGG_FC if spec.base in {Base.VGG16, Base.VGG16_BN} else Head.LINEAR
    model = WbcModel(spec, net, feature_tap=head_path, head_kind=head_kind)

    if spec.head is Head.VGG_FC and model.head_kind is not Head.VGG_FC:
        model = add_vgg_fc_head(model, dropout=spec.fc_dropout)

    if spec.norm_strategy is NormStrategy.REPLACE_BN_WITH_GN:
        if spec.pretrained and gn_checkpoint is None:
            fetcher = WeightsFetcher(cfg)
            gn_checkpoint = fetcher.fetch(cfg.gn_weights_url, cfg.gn_weights_sha256)
        model = replace_bn_with_gn(model, spec.gn_groups, checkpoint=gn_checkpoint)

    if spec.norm_strategy is NormStrategy.FREEZE_BN or spec.trainable_last_k:
        model = apply_freeze_policy(model, spec)

    logger.info(
        f"Built {spec.key}: {count_parameters(model):,} parameters, "
        f"{count_parameters(model, trainable_only=True):,} trainable"
    )
    return model


def add_vgg_fc_head(model: WbcModel, dropout: float = 0.5) -> WbcModel:
    """Swap the single linear classifier for a 4096-4096 VGG-style stack."""
    if model.head_kind is Head.VGG_FC:
        raise SurgeryError("model already carries a VGG_FC head")
    linear = model.net.get_submodule(model.feature_tap)
    if not isinstance(linear, nn.Linear):
        raise SurgeryError(f"{model.feature_tap} is not a linear classifier")
    stack = nn.Sequential(
        nn.Linear(linear.in_features, VGG_FC_WIDTH),
        nn.ReLU(inplace=True),
        nn.Dropout(p=dropout),
        nn.Linear(VGG_FC_WIDTH, VGG_FC_WIDTH),
        nn.ReLU(inplace=True),
        nn.Dropout(p=dropout),
        nn.Linear(VGG_FC_WIDTH, linear.out_features),
    )
    _set_submodule(model.net, model.feature_tap, stack)
    model.feature_tap = f"{model.feature_tap}.6"
    model.head_kind = Head.VGG_FC
    return model


def batchnorm_layers(model: nn.Module) -> List[Tuple[str, nn.BatchNorm2d]]:
    return [(name, m) for name, m in model.named_modules() if isinstance(m, nn.BatchNorm2d)]


def replace_bn_with_gn(
    model: WbcModel, num_groups: int = DEFAULT_GN_GROUPS, checkpoint: Optional[Path] = None
) -> WbcModel:
    """Replace every BatchNorm2d by GroupNorm and load GN-pretrained weights.

    Without a checkpoint the GN layers start at the identity affine, which is
    only allowed when the model spec is not pretrained.
    """
    bns = batchnorm_layers(model.net)
    if not bns:
        logger.info(f"{model.spec.key}: no batch norm layers to replace")
        return model

    for name, bn in bns:
        if bn.num_features % num_groups != 0:
            raise SurgeryError(
                f"layer {name} has {bn.num_features} channels, not divisible into {num_groups} groups"
            )
    if model.spec.pretrained and checkpoint is None:
        raise ConfigurationError(
            "GN-pretrained weights are required for a pretrained GN model; "
            "pass a checkpoint or run `wbcbench prepare --fetch-gn-weights`"
        )

    for name, bn in bns:
        gn = nn.GroupNorm(num_groups, bn.num_features, eps=bn.eps, affine=True)
        _set_submodule(model.net, name, gn)
    logger.info(f"{model.spec.key}: replaced {len(bns)} BN layers with GN({num_groups})")

    if checkpoint is not None:
        state = load_gn_state_dict(Path(checkpoint))
        missing, unexpected = model.net.load_state_dict(state, strict=False)
        head_prefix = model.feature_tap.split(".")[0]
        missing = [k for k in missing if not k.startswith(head_prefix)]
        if missing:
            raise ConfigurationError(f"GN checkpoint {checkpoint} lacks {len(missing)} tensors, e.g. {missing[:3]}")
        if unexpected:
            logger.warning(f"GN checkpoint {checkpoint}: ignored {len(unexpected)} unexpected tensors")
    return model


def apply_freeze_policy(model: WbcModel, spec: Optional[ModelSpec] = None) -> WbcModel:
    """Freeze BN statistics and/or restrict training to the last k weight layers.

    Weight-bearing layers (conv and linear) are counted backward in module
    registration order, classifier included.
    """
    spec = spec or model.spec
    if spec.norm_strategy is NormStrategy.FREEZE_BN:
        bns = batchnorm_layers(model.net)
        for name, bn in bns:
            _set_submodule(model.net, name, FrozenBatchNorm2d.from_batchnorm(bn, freeze_affine=spec.freeze_affine))
        logger.info(f"{spec.key}: froze {len(bns)} BN layers (affine frozen: {spec.freeze_affine})")

    k = spec.trainable_last_k
    if k:
        layers = model.weight_layers()
        if k > len(layers):
            raise SurgeryError(f"trainable_last_k={k} exceeds the {len(layers)} weight-bearing layers")
        keep = {id(m) for _, m in layers[-k:]}
        for module in model.net.modules():
            trainable = id(module) in keep
            for p in module.parameters(recurse=False):
                p.requires_grad_(trainable)
        logger.info(f"{spec.key}: training only the last {k} of {len(layers)} weight layers ({layers[-k][0]} onward)")
    return model


@torch.no_grad()
def extract_features(model: WbcModel, images: torch.Tensor) -> np.ndarray:
    """Penultimate activations (the classifier's input) as an N x D matrix."""
    captured: List[torch.Tensor] = []
    tap = model.net.get_submodule(model.feature_tap)
    handle = tap.register_forward_pre_hook(lambda _m, inputs: captured.append(inputs[0].detach()))
    was_training = model.training
    model.eval()
    try:
        model(images)
    finally:
        handle.remove()
        model.train(was_training)
    feats = captured[0].flatten(1)
    return feats.cpu().float().numpy()


def count_parameters(model: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def norm_layer_census(model: nn.Module) -> Dict[str, int]:
    census = {"batch_norm": 0, "frozen_batch_norm": 0, "group_norm": 0, "layer_norm": 0}
    for m in model.modules():
        if isinstance(m, FrozenBatchNorm2d):
            census["frozen_batch_norm"] += 1
        elif isinstance(m, nn.BatchNorm2d):
            census["batch_norm"] += 1
        elif isinstance(m, nn.GroupNorm):
            census["group_norm"] += 1
        elif isinstance(m, nn.LayerNorm):
            census["layer_norm"] += 1
    return census


def save_checkpoint(model: WbcModel, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"spec": model.spec.model_dump(mode="json"), "state_dict": model.state_dict()},
        path,
    )
    return path


def load_checkpoint(path: Path, map_location: str = "cpu") -> WbcModel:
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location=map_location)
    spec = ModelSpec.model_validate(payload["spec"])
    # Rebuild the architecture offline, then restore every tensor from the archive.
    model = build_model(spec.model_copy(update={"pretrained": False}))
    model.spec = spec
    model.load_state_dict(payload["state_dict"])
    return model
