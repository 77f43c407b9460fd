"""Soft attention over a downsampled slide, and the tile feature network.

The attention network is a small ReLU CNN followed by max pooling and a
one-channel 3x3 head; a softmax over every spatial position turns the head
output into a distribution that sums to one.
"""
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

EPS = 1e-8


@dataclass
class SoftAttentionConfig:
    conv_layers: int = 4
    base_channels: int = 8
    pool_size: int = 8
    feature_depth: int = 8
    feature_width: int = 32
    feature_stride: int = 4

    def __post_init__(self):
        if self.conv_layers < 1:
            raise ValueError("conv_layers must be >= 1")
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")

    @property
    def channels(self):
        return [self.base_channels * 2 ** i for i in range(self.conv_layers)]


PRESETS = {
    "her2": SoftAttentionConfig(conv_layers=4, base_channels=8, pool_size=8, feature_depth=8, feature_width=32),
    "mmr": SoftAttentionConfig(conv_layers=5, base_channels=8, pool_size=3, feature_depth=8, feature_width=32),
    # reduced network for single-CPU synthetic runs
    "synthetic": SoftAttentionConfig(conv_layers=3, base_channels=4, pool_size=8, feature_depth=2,
                                     feature_width=16, feature_stride=4),
}


class SoftAttentionNet(nn.Module):
    """Feature extractor ``f_e`` followed by the attention head ``f_a``."""

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg or SoftAttentionConfig()
        layers, c_in = [], 3
        for c_out in self.cfg.channels:
            layers += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU()]
            c_in = c_out
        self.features = nn.Sequential(*layers)
        self.pool = nn.MaxPool2d(self.cfg.pool_size, ceil_mode=True)
        self.head = nn.Conv2d(c_in, 1, 3, padding=1)

    def forward(self, x):
        """(B, 3, h, w) image in [0, 1] -> (B, gh, gw) attention logits."""
        return self.head(self.pool(self.features(x)))[:, 0]


@dataclass
class AttentionMap:
    probs: torch.Tensor  # (gh, gw), sums to one, may carry grad
    source_shape: tuple

    @property
    def shape(self):
        return tuple(self.probs.shape)

    def numpy(self):
        return self.probs.detach().cpu().numpy().astype(np.float64)

    @property
    def normalized(self):
        return minmax_normalize(self)


def image_to_tensor(image, dtype=torch.float32):
    """HxWx3 uint8 raster(s) -> (B, 3, H, W) tensor scaled to [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr)).to(dtype) / 255.0
    return t.permute(0, 3, 1, 2).contiguous()


def spatial_softmax(logits):
    """Softmax over all spatial positions of (B, gh, gw) logits."""
    b = logits.shape[0]
    return F.softmax(logits.reshape(b, -1), dim=1).reshape(logits.shape)


def compute_attention(model, image, expected_shape=None):
    """Attention maps for one HxWx3 raster or a batch of them.

    Tensors are taken as already scaled (3, H, W) or (B, 3, H, W) inputs.
    Returns one ``AttentionMap`` for a single image, else a list.
    """
    if torch.is_tensor(image):
        single = image.ndim == 3
        x = image[None] if single else image
    else:
        arr = np.asarray(image)
        if arr.shape[-1] != 3 or arr.ndim not in (3, 4):
            raise ValueError(f"expected RGB raster(s), got shape {arr.shape}")
        single = arr.ndim == 3
        x = image_to_tensor(arr, dtype=next(model.parameters()).dtype)
    if expected_shape is not None and tuple(x.shape[-2:]) != tuple(expected_shape):
        raise ValueError(f"attention input is {tuple(x.shape[-2:])}, expected {tuple(expected_shape)}")
    probs = spatial_softmax(model(x))
    maps = [AttentionMap(p, tuple(x.shape[-2:])) for p in probs]
    return maps[0] if single else maps


def minmax_normalize(a, eps=EPS):
    """Map attention values into (0, 1]: ``(A - min + eps) / (max - min + eps)``."""
    if isinstance(a, AttentionMap):
        a = a.numpy()
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.ones_like(a)
    return (a - lo + eps) / (hi - lo + eps)


def tile_feature_expectation(features, attention):
    """Attention-weighted mean ``sum_i a_i f_i / sum_j a_j`` of tile features.

    Differentiable in both arguments; this is the path through which tile
    classification trains the attention network.
    """
    if len(features) == 0:
        raise ValueError("need at least one tile")
    feats = features if torch.is_tensor(features) else torch.stack(list(features))
    att = attention if torch.is_tensor(attention) else torch.stack(list(attention))
    if feats.shape[0] != att.shape[0]:
        raise ValueError("features and attention values differ in length")
    w = att / att.sum()
    return (w[:, None] * feats).sum(0)


class ResidualBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


class TileFeatureNet(nn.Module):
    """Residual feature extractor ``f_f`` for 128x128 tile thumbnails.

    ``depth`` counts the convolutions inside the residual stack (two per
    block).
    """

    def __init__(self, depth=8, width=32, stride=4):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, stride=stride, padding=1), nn.ReLU())
        self.blocks = nn.Sequential(*[ResidualBlock(width) for _ in range(max(1, depth // 2))])
        self.out_dim = width

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.blocks(self.stem(x)), 1).flatten(1)


class SoftAttentionModel(nn.Module):
    """Attention network plus the slide-level classifier on expected tile features."""

    def __init__(self, cfg=None, n_classes=4):
        super().__init__()
        self.cfg = cfg or SoftAttentionConfig()
        self.attention = SoftAttentionNet(self.cfg)
        self.tile_features = TileFeatureNet(self.cfg.feature_depth, self.cfg.feature_width,
                                            self.cfg.feature_stride)
        self.classifier = nn.Linear(self.tile_features.out_dim, n_classes)

    def forward(self, image):
        return compute_attention(self.attention, image)

    def classify_tiles(self, tiles, attention_values):
        """Slide logits from N tile thumbnails and their attention values."""
        x = image_to_tensor(np.stack(tiles), dtype=next(self.parameters()).dtype)
        feats = self.tile_features(x)
        return self.classifier(tile_feature_expectation(feats, attention_values))
