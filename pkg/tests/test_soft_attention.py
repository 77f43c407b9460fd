import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dualattn.soft_attention import (PRESETS, SoftAttentionConfig, SoftAttentionModel, SoftAttentionNet,
                                     compute_attention, minmax_normalize, spatial_softmax,
                                     tile_feature_expectation)


@pytest.fixture(scope="module")
def net():
    torch.manual_seed(0)
    return SoftAttentionNet(SoftAttentionConfig(conv_layers=2, base_channels=4, pool_size=8))


def test_attention_sums_to_one(net):
    img = np.random.default_rng(0).integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    a = compute_attention(net, img)
    assert a.shape == (8, 8)
    assert abs(float(a.probs.sum()) - 1.0) < 1e-5
    assert (a.numpy() >= 0).all()


@pytest.mark.parametrize("h,w,pool", [(64, 64, 8), (60, 50, 8), (30, 31, 3)])
def test_grid_shape_is_ceil(h, w, pool):
    net = SoftAttentionNet(SoftAttentionConfig(conv_layers=1, base_channels=2, pool_size=pool))
    a = compute_attention(net, np.zeros((h, w, 3), np.uint8))
    assert a.shape == (math.ceil(h / pool), math.ceil(w / pool))


def test_batch_and_shape_check(net):
    imgs = np.zeros((3, 32, 32, 3), np.uint8)
    maps = compute_attention(net, imgs)
    assert len(maps) == 3
    with pytest.raises(ValueError):
        compute_attention(net, imgs[0], expected_shape=(64, 64))
    with pytest.raises(ValueError):
        compute_attention(net, np.zeros((32, 32), np.uint8))


def test_spatial_softmax_matches_flat_softmax():
    x = torch.randn(2, 3, 5, dtype=torch.float64)
    p = spatial_softmax(x)
    ref = torch.exp(x) / torch.exp(x).sum(dim=(1, 2), keepdim=True)
    torch.testing.assert_close(p, ref)


def test_minmax_constant_map_is_ones():
    np.testing.assert_array_equal(minmax_normalize(np.full((4, 4), 0.3)), np.ones((4, 4)))


@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=50))
@settings(max_examples=100, deadline=None)
def test_minmax_properties(values):
    a = np.asarray(values)
    n = minmax_normalize(a)
    assert (n > 0).all() and (n <= 1 + 1e-12).all()
    if a.max() > a.min():
        assert n[np.argmax(a)] == pytest.approx(1.0)
        # order preserving
        order = np.argsort(a, kind="stable")
        assert np.all(np.diff(n[order]) >= -1e-12)


def test_tile_feature_expectation_loop_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n, d = rng.integers(1, 12), rng.integers(1, 6)
        f = torch.as_tensor(rng.normal(size=(n, d)))
        a = torch.as_tensor(rng.uniform(0.01, 1, size=n))
        ref = np.zeros(d)
        for i in range(n):
            ref += a[i].item() * f[i].numpy()
        ref /= a.sum().item()
        np.testing.assert_allclose(tile_feature_expectation(f, a).numpy(), ref, atol=1e-12)


def test_tile_feature_expectation_errors():
    with pytest.raises(ValueError):
        tile_feature_expectation(torch.zeros(0, 3), torch.zeros(0))
    with pytest.raises(ValueError):
        tile_feature_expectation(torch.zeros(2, 3), torch.ones(3))


def test_model_classify_tiles_backprops_into_attention():
    torch.manual_seed(0)
    model = SoftAttentionModel(PRESETS["synthetic"], 4)
    img = np.random.default_rng(0).integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    a = compute_attention(model.attention, img)
    tiles = [np.random.default_rng(i).integers(0, 256, size=(32, 32, 3), dtype=np.uint8) for i in range(3)]
    logits = model.classify_tiles(tiles, a.probs.flatten()[:3])
    logits[1].backward()
    assert model.attention.head.weight.grad is not None
    assert model.attention.head.weight.grad.abs().sum() > 0


def test_presets_valid():
    for cfg in PRESETS.values():
        assert len(cfg.channels) == cfg.conv_layers
    with pytest.raises(ValueError):
        SoftAttentionConfig(conv_layers=0)
