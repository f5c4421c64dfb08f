import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ghclnet.backbone import (
    FULL_POLICY,
    STAGE3_5_POLICY,
    SMALL_DATA_POLICY,
    BackboneConfig,
    FreezePolicy,
    PretrainedWeightsUnavailable,
    ResNetBackbone,
    UnknownUnitError,
    apply_freeze,
    build_backbone,
    extract_activations,
    feature_shapes,
    forward,
    load_checkpoint,
    save_checkpoint,
    unit_of,
)
from ghclnet.datamodel import ExpertKind
from ghclnet.ingestion import ImageTensor

from gradcheck import sampled_gradient_check

T = ExpertKind.TEXTURED_DETECTOR


def rand_image(rng, scale=1.0):
    return ImageTensor(rng.normal(0, scale, (224, 224, 3)).astype(np.float32), "rand")


@pytest.fixture(scope="module")
def small_model():
    return build_backbone(BackboneConfig(width_scale=0.25, pretrained=False), T, STAGE3_5_POLICY)


def test_feature_shapes_full_config():
    shapes = feature_shapes(BackboneConfig(pretrained=False))
    assert [s for s, _ in shapes] == [1, 2, 3, 4, 5]
    sizes = [n for _, n in shapes]
    assert sizes[0] == 112 and sizes[1] in (55, 56) and sizes[2:] == [28, 14, 7]


def test_feature_shapes_half_input():
    # 112 -> 56 (stem) -> 28 (pool) -> 14 -> 7 -> 4 with "same"-style padding
    assert feature_shapes(BackboneConfig(input_size=112, pretrained=False))[-1] == (5, 4)


@given(st.integers(32, 512))
def test_feature_shapes_strictly_decrease(n):
    sizes = [s for _, s in feature_shapes(BackboneConfig(input_size=n, pretrained=False))]
    assert all(a > b for a, b in zip(sizes, sizes[1:]))


def test_feature_shapes_match_forward_pass(small_model, rng):
    acts = extract_activations(small_model, rand_image(rng), ["block1", "block2", "block3", "block4", "block5"])
    measured = [a.shape[1] for a in acts.values()]
    assert measured == [n for _, n in feature_shapes(small_model.config)]


def test_width_scale_channels():
    cfg = BackboneConfig(width_scale=0.25, pretrained=False)
    full = ResNetBackbone(BackboneConfig(pretrained=False))
    small = ResNetBackbone(cfg)
    assert small.conv1.out_channels == math.ceil(64 * 0.25)
    for i in range(1, 5):
        a, b = getattr(full, f"layer{i}"), getattr(small, f"layer{i}")
        assert len(a) == len(b)
        assert b[0].conv2.out_channels == math.ceil(a[0].conv2.out_channels * 0.25)
    assert len(small.layer1) == 3 and len(small.layer2) == 4 and len(small.layer3) == 6 and len(small.layer4) == 3


def test_config_invariants():
    with pytest.raises(ValueError):
        BackboneConfig(width_scale=0.5, pretrained=True)
    with pytest.raises(ValueError):
        BackboneConfig(width_scale=0.0, pretrained=False)
    with pytest.raises(ValueError):
        BackboneConfig(width_scale=1.5, pretrained=False)


def test_same_seed_same_head():
    cfg = BackboneConfig(width_scale=0.25, pretrained=False, seed=3)
    a, b = build_backbone(cfg, T), build_backbone(cfg, T)
    assert torch.equal(a.net.fc.weight, b.net.fc.weight) and torch.equal(a.net.fc.bias, b.net.fc.bias)
    c = build_backbone(BackboneConfig(width_scale=0.25, pretrained=False, seed=4), T)
    assert not torch.equal(a.net.fc.weight, c.net.fc.weight)


def test_pretrained_unavailable_is_reported(monkeypatch, tmp_path):
    cfg = BackboneConfig(pretrained=True, weights_path=str(tmp_path / "missing.pth"))
    with pytest.raises(PretrainedWeightsUnavailable):
        build_backbone(cfg, T)


def test_torchvision_weights_load_strictly(tmp_path):
    torchvision = pytest.importorskip("torchvision")
    ref = torchvision.models.resnet50(weights=None)
    path = tmp_path / "r50.pth"
    torch.save(ref.state_dict(), path)
    model = build_backbone(BackboneConfig(pretrained=True, weights_path=str(path)), T)
    assert torch.equal(model.net.layer3[2].conv2.weight, ref.layer3[2].conv2.weight)
    assert torch.equal(model.net.bn1.running_var, ref.bn1.running_var)
    # head is new, not copied
    assert model.net.fc.weight.shape == (2, 2048)


def test_stage3_5_policy_marking(small_model):
    apply_freeze(small_model, STAGE3_5_POLICY)
    for name, trainable in small_model.trainable_map().items():
        unit = unit_of(name, small_model.config)
        expect = unit == "head" or unit.startswith(("block3", "block5"))
        assert trainable == expect, name


def test_block5c_policy_marking(small_model):
    apply_freeze(small_model, SMALL_DATA_POLICY)
    for name, trainable in small_model.trainable_map().items():
        unit = unit_of(name, small_model.config)
        assert trainable == (unit in ("block5c", "head")), name
    apply_freeze(small_model, STAGE3_5_POLICY)


def test_policy_errors(small_model):
    with pytest.raises(ValueError, match="head"):
        FreezePolicy(frozenset())
    with pytest.raises(UnknownUnitError):
        apply_freeze(small_model, FreezePolicy(frozenset({"block7", "head"})))
    with pytest.raises(UnknownUnitError):
        apply_freeze(small_model, FreezePolicy(frozenset({"block5d", "head"})))


def test_frozen_bn_stays_in_eval(small_model):
    apply_freeze(small_model, STAGE3_5_POLICY)
    small_model.net.train()
    assert not small_model.net.bn1.training and not small_model.net.layer3[0].bn1.training
    assert small_model.net.layer2[0].bn1.training and small_model.net.layer4[2].bn3.training
    small_model.net.eval()


def test_forward_batch_of_one(small_model, rng):
    p = forward(small_model, [rand_image(rng)])
    assert p.shape == (1, 2)
    assert abs(p.sum() - 1) < 1e-6


def test_forward_duplicate_rows_identical(small_model, rng):
    img = rand_image(rng)
    p = forward(small_model, [img, rand_image(rng), img])
    assert np.array_equal(p[0], p[2])


def test_forward_shape_mismatch(small_model):
    with pytest.raises(ValueError):
        forward(small_model, [ImageTensor(np.zeros((100, 100, 3), np.float32))])


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.01, 20.0))
def test_probabilities_sum_to_one(small_model, seed, scale):
    p = forward(small_model, [rand_image(np.random.default_rng(seed), scale)])
    assert np.isfinite(p).all() and (p >= 0).all() and (p <= 1).all()
    assert abs(p.sum() - 1.0) < 1e-6


def test_extract_activations_order_and_sizes(small_model, rng):
    acts = extract_activations(small_model, rand_image(rng), ["block5", "block1"])
    assert list(acts) == ["block5", "block1"]
    assert acts["block1"].shape[1:] == (112, 112)
    assert acts["block5"].shape[1:] == (7, 7)
    sub = extract_activations(small_model, rand_image(rng), ["block3b", "block4e.conv2", "block2a.conv1"])
    assert sub["block3b"].shape[1:] == (28, 28)
    assert sub["block4e.conv2"].shape[1:] == (14, 14)
    assert sub["block2a.conv1"].shape[1:] == (56, 56)
    with pytest.raises(UnknownUnitError):
        extract_activations(small_model, rand_image(rng), ["block9"])
    with pytest.raises(UnknownUnitError):
        extract_activations(small_model, rand_image(rng), ["block5z"])


GRADCHECK_CFG = BackboneConfig(input_size=64, width_scale=0.25, pretrained=False, seed=1)


def test_gradient_check_float64():
    model = build_backbone(GRADCHECK_CFG, T, FULL_POLICY)
    result = sampled_gradient_check(model, per_stage=4, h=1e-4, seed=1)
    assert len(result.errors) >= 10, result
    assert len({name.split(".")[0] for name, *_ in result.errors}) >= 3
    assert result.worst < 1e-3, result.errors


def test_gradient_check_catches_a_wrong_gradient(monkeypatch):
    # scale every analytic gradient by 1.01 after backward: the checker must notice
    model = build_backbone(GRADCHECK_CFG, T, FULL_POLICY)
    real_backward = torch.Tensor.backward

    def skewed(self, *a, **kw):
        real_backward(self, *a, **kw)
        for p in model.net.parameters():
            if p.grad is not None:
                p.grad.mul_(1.01)

    monkeypatch.setattr(torch.Tensor, "backward", skewed)
    result = sampled_gradient_check(model, per_stage=2, h=1e-4, seed=1)
    assert result.errors and result.worst > 1e-3


def test_checkpoint_roundtrip(tmp_path, small_model, rng):
    save_checkpoint(small_model, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.kind == small_model.kind and back.config == small_model.config
    assert back.policy == small_model.policy
    for k, v in small_model.net.state_dict().items():
        assert torch.equal(v, back.net.state_dict()[k]), k
    img = rand_image(rng)
    assert np.array_equal(forward(back, [img]), forward(small_model, [img]))
    save_checkpoint(back, tmp_path / "ck2")
    for f in ("metadata.json", "parameters.npz"):
        assert (tmp_path / "ck" / f).read_bytes() == (tmp_path / "ck2" / f).read_bytes()
