from __future__ import annotations

import pytest
import torch
from pydantic import ValidationError
from torch import nn

from wbcbench.config import ConfigurationError
from wbcbench.modelzoo import (
    DESK_SPECS,
    VARIANT_ORDER,
    Base,
    Head,
    ModelSpec,
    NormStrategy,
    SurgeryError,
    add_vgg_fc_head,
    apply_freeze_policy,
    batchnorm_layers,
    build_model,
    canonical_variant_id,
    extract_features,
    load_checkpoint,
    norm_layer_census,
    replace_bn_with_gn,
    save_checkpoint,
    variant_slug,
)
from wbcbench.normalization import FrozenBatchNorm2d
from wbcbench.trainer import frozen_state_checksum


def offline(variant: str, **overrides) -> ModelSpec:
    return ModelSpec.for_variant(variant, pretrained=False, **overrides)


def test_variant_ids_canonicalize() -> None:
    assert canonical_variant_id("A") == "a"
    assert canonical_variant_id("b′") == "b'"
    assert canonical_variant_id("a_prime") == "a'"
    assert variant_slug("b'") == "b_prime"
    with pytest.raises(ValueError):
        canonical_variant_id("e")


def test_every_variant_spec_is_valid() -> None:
    for vid in VARIANT_ORDER:
        spec = offline(vid)
        assert spec.key == vid
    assert offline("iii").trainable_last_k == 16
    assert offline("b").head is Head.VGG_FC


def test_inconsistent_specs_are_rejected() -> None:
    with pytest.raises(ValidationError):
        ModelSpec(base=Base.VGG16, norm_strategy=NormStrategy.FREEZE_BN, head=Head.VGG_FC)
    with pytest.raises(ValidationError):
        ModelSpec(base=Base.VIT_B16, norm_strategy=NormStrategy.REPLACE_BN_WITH_GN)
    with pytest.raises(ValidationError):
        ModelSpec(base=Base.RESNET50, variant_id="i")
    with pytest.raises(ValidationError):
        ModelSpec(base=Base.RESNET50, trainable_last_k=0)


def test_resnet50_surgery_counts(env) -> None:
    plain = build_model(offline("a"), env)
    assert len(batchnorm_layers(plain)) == 53
    assert plain.net.fc.out_features == 5

    gn = build_model(offline("i"), env)
    assert norm_layer_census(gn) == {"batch_norm": 0, "frozen_batch_norm": 0, "group_norm": 53, "layer_norm": 0}

    frozen = build_model(offline("ii"), env)
    assert norm_layer_census(frozen)["frozen_batch_norm"] == 53
    trainable = {name for name, p in frozen.named_parameters() if p.requires_grad}
    assert "net.bn1.weight" not in trainable
    assert "net.conv1.weight" in trainable


def test_last_k_freezing_keeps_only_the_tail_trainable(env) -> None:
    model = build_model(offline("iii"), env)
    layers = model.weight_layers()
    assert layers[-1][0] == "fc"
    tail = {id(m) for _, m in layers[-16:]}
    for _, module in layers:
        assert module.weight.requires_grad == (id(module) in tail)
    assert all(not p.requires_grad for m in model.modules() if isinstance(m, FrozenBatchNorm2d) for p in m.parameters())


def test_freeze_policy_rejects_too_large_k() -> None:
    spec = DESK_SPECS["desk-frozen"].model_copy(update={"trainable_last_k": 10})
    with pytest.raises(SurgeryError):
        build_model(spec)


def test_gn_replacement_checks_divisibility() -> None:
    model = build_model(DESK_SPECS["desk-bn"])
    with pytest.raises(SurgeryError, match="features.1"):
        replace_bn_with_gn(model, num_groups=5)


def test_gn_replacement_without_bn_is_a_no_op(env) -> None:
    model = build_model(offline("b"), env)
    assert replace_bn_with_gn(model, 32) is model
    assert norm_layer_census(model)["group_norm"] == 0


def test_pretrained_gn_needs_a_checkpoint(env) -> None:
    model = build_model(offline("a"), env)
    model.spec = offline("i").model_copy(update={"pretrained": True})
    with pytest.raises(ConfigurationError):
        replace_bn_with_gn(model, 32, checkpoint=None)


def test_vgg_fc_head_cannot_be_added_twice(env) -> None:
    model = build_model(offline("a'"), env)
    assert model.head_kind is Head.VGG_FC
    assert model.feature_tap == "fc.6"
    assert model.net.fc[0].in_features == 2048
    with pytest.raises(SurgeryError):
        add_vgg_fc_head(model)

    vgg = build_model(offline("b"), env)
    with pytest.raises(SurgeryError):
        add_vgg_fc_head(vgg)


def test_penultimate_features(env) -> None:
    torch.manual_seed(0)
    resnet = build_model(offline("a"), env)
    resnet.train()
    feats = extract_features(resnet, torch.randn(2, 3, 64, 64))
    assert feats.shape == (2, 2048)
    assert resnet.training

    fc_head = build_model(offline("a'"), env)
    assert extract_features(fc_head, torch.randn(2, 3, 64, 64)).shape == (2, 4096)

    tiny = build_model(DESK_SPECS["desk-gn"])
    assert extract_features(tiny, torch.randn(3, 3, 32, 32)).shape == (3, 64)


def test_frozen_checksum_survives_a_training_step() -> None:
    torch.manual_seed(0)
    model = build_model(DESK_SPECS["desk-frozen"])
    before = frozen_state_checksum(model)
    assert before is not None
    optimizer = torch.optim.AdamW(model.trainable_parameters(), lr=1e-2)
    model.train()
    loss = nn.functional.cross_entropy(model(torch.randn(8, 3, 32, 32)), torch.arange(8) % 5)
    loss.backward()
    optimizer.step()
    assert frozen_state_checksum(model) == before
    assert frozen_state_checksum(build_model(DESK_SPECS["desk-bn"])) is None


def test_checkpoint_round_trip(tmp_path) -> None:
    torch.manual_seed(1)
    model = build_model(DESK_SPECS["desk-gn"])
    path = save_checkpoint(model, tmp_path / "model.ckpt")
    restored = load_checkpoint(path)
    assert restored.spec == model.spec
    x = torch.randn(2, 3, 32, 32)
    model.eval()
    restored.eval()
    torch.testing.assert_close(restored(x), model(x))
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_apply_freeze_policy_on_tiny_cnn() -> None:
    model = build_model(DESK_SPECS["desk-bn"])
    spec = DESK_SPECS["desk-frozen"].model_copy(update={"freeze_affine": False})
    apply_freeze_policy(model, spec)
    frozen = [m for m in model.modules() if isinstance(m, FrozenBatchNorm2d)]
    assert len(frozen) == 3
    assert all(m.weight.requires_grad for m in frozen)


@pytest.mark.parametrize("variant", VARIANT_ORDER)
def test_every_variant_maps_images_to_five_logits(variant: str, env) -> None:
    torch.manual_seed(0)
    model = build_model(offline(variant), env).eval()
    with torch.no_grad():
        out = model(torch.randn(1, 3, 224, 224))
    assert out.shape == (1, 5)
