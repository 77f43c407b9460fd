"""Comparison systems: random tissue tiles, and a sliding-window patch classifier."""
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .metrics import SlideScore
from .pyramid import downsample, grayscale, tissue_mask
from .sampler import SampleResult, extract_tiles, map_to_slide
from .soft_attention import image_to_tensor


def gumbel_random_tiles(mask, n, rng, s=None, pool=None):
    """Uniform sample of ``n`` in-mask grid cells without replacement.

    Gumbel-perturbed top-``n`` over a flat score field. Returns ``(x, y)``
    grid cells, or base coordinates when ``s`` and ``pool`` are given.
    """
    mask = np.asarray(mask, bool)
    cells = np.flatnonzero(mask)
    if cells.size == 0:
        raise ValueError("mask is empty")
    gumbel = -np.log(-np.log(rng.random(cells.size) * (1 - 1e-12) + 1e-300))
    keep = cells[np.argsort(-gumbel, kind="stable")[:n]]
    rows, cols = np.unravel_index(keep, mask.shape)
    grid = [(int(x), int(y)) for y, x in zip(rows, cols)]
    if s is None:
        return grid
    return map_to_slide(grid, s, pool)


class RandomTileSource:
    """Tiles drawn uniformly from the tissue grid; no soft attention involved."""

    name = "random"

    def __init__(self, sampler_cfg):
        self.cfg = sampler_cfg

    def select(self, item, rng, attention=None):
        cfg = self.cfg
        grid = gumbel_random_tiles(item.tissue_grid, cfg.n_tiles, rng)
        coords = map_to_slide(grid, cfg.scale, cfg.pool)
        n_cells = item.tissue_grid.size
        tiles = extract_tiles(item.slide, coords, grid, [1.0 / n_cells] * len(grid),
                              cfg.tile_size_base, cfg.tile_size_model)
        return SampleResult(tiles, list(grid), [(y, x) for x, y in grid], item.tissue_grid,
                            item.tissue_grid.astype(float))


@dataclass
class SlidingWindowConfig:
    patch_size: int = 224
    magnification: str = "20x"
    tissue_fraction_min: float = 0.35
    dab_threshold: float = 0.85
    overlap: int = 0
    top_k_probs: int = 15

    def __post_init__(self):
        for name in ("tissue_fraction_min", "dab_threshold"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")


def dab_mask(image, threshold=0.85, tissue=None):
    """Stained pixels: luminance below ``threshold`` inside the tissue mask."""
    image = np.asarray(image)
    if tissue is None:
        tissue = tissue_mask(image).mask
    return (grayscale(image) < threshold) & np.asarray(tissue, bool)


def _overlap_1d(start, length, n_pixels, factor):
    """Overlap (in base pixels) of ``[start, start + length)`` with each mask pixel."""
    edges = np.arange(n_pixels + 1) * factor
    lo = np.maximum(edges[:-1], start)
    hi = np.minimum(edges[1:], start + length)
    return np.clip(hi - lo, 0, None)


@dataclass
class Patch:
    top_left: tuple  # base coordinates
    fraction: float


def patch_fractions(mask, mask_factor, patch_base, stride_base, base_size):
    """Foreground fraction of every full patch on a non-overlapping grid."""
    mask = np.asarray(mask, dtype=np.float64)
    H, W = base_size
    out = []
    for Y in range(0, H - patch_base + 1, stride_base):
        wy = _overlap_1d(Y, patch_base, mask.shape[0], mask_factor)
        rows = np.flatnonzero(wy)
        for X in range(0, W - patch_base + 1, stride_base):
            wx = _overlap_1d(X, patch_base, mask.shape[1], mask_factor)
            cols = np.flatnonzero(wx)
            frac = wy[rows] @ mask[np.ix_(rows, cols)] @ wx[cols] / patch_base ** 2
            out.append(Patch((X, Y), float(frac)))
    return out


def sliding_window_patches(slide, cfg=None, low_factor=32):
    """Non-overlapping ``patch_size`` patches at ``cfg.magnification`` kept by foreground fraction.

    Masks are computed once at ``low_factor`` and the in-patch fraction of
    tissue-and-DAB pixels must exceed ``tissue_fraction_min``.
    """
    cfg = cfg or SlidingWindowConfig()
    low = downsample(slide, low_factor)
    tissue = tissue_mask(low).mask
    fg = dab_mask(low, cfg.dab_threshold, tissue)
    scale = slide.level_scale[slide.level_index(cfg.magnification)]
    patch_base = cfg.patch_size * scale
    stride_base = (cfg.patch_size - cfg.overlap) * scale
    patches = patch_fractions(fg, low_factor, patch_base, stride_base, slide.base_size)
    return [p for p in patches if p.fraction > cfg.tissue_fraction_min]


def read_patch(slide, patch, cfg=None):
    cfg = cfg or SlidingWindowConfig()
    return slide.read_region(cfg.magnification, patch.top_left, (cfg.patch_size, cfg.patch_size))


def sliding_window_classify(patch_probs, top_k=15, slide_id="", positive_class=1):
    """Slide score = mean of the ``top_k`` largest positive-class patch probabilities.

    With fewer than ``top_k`` patches all of them are used and the result is
    flagged through ``SlideScore.flags["shortfall"]``.
    """
    p = np.asarray(patch_probs, dtype=np.float64)
    if p.ndim == 2:
        p = p[:, positive_class]
    if p.size == 0:
        raise ValueError("no patches to classify")
    top = np.sort(p)[::-1][:top_k]
    prob = float(top.mean())
    rows = np.stack([1 - top, top], 1)
    return SlideScore(slide_id, int(prob >= 0.5), prob, rows,
                      flags={"shortfall": bool(p.size < top_k), "n_patches": int(p.size)})


def make_patch_classifier(n_classes=2, arch="resnet18"):
    """Residual patch classifier; ``arch="small"`` gives a light CPU-friendly net."""
    if arch == "resnet18":
        from torchvision.models import resnet18

        return resnet18(weights=None, num_classes=n_classes)
    if arch == "small":
        return nn.Sequential(
            nn.Conv2d(3, 8, 5, stride=4, padding=2), nn.ReLU(),
            nn.Conv2d(8, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(16, n_classes),
        )
    raise ValueError(f"unknown patch classifier {arch!r}")


def patch_probabilities(model, patches, batch_size=32):
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(patches), batch_size):
            x = image_to_tensor(np.stack(patches[i:i + batch_size]))
            out.append(F.softmax(model(x), -1).numpy())
    return np.concatenate(out) if out else np.zeros((0, 2))


def train_patch_classifier(patches, labels, n_classes=2, epochs=3, lr=1e-3, seed=0, arch="resnet18",
                           batch_size=16):
    """Weakly supervised training: every patch inherits its slide's label.

    Batches are drawn class-balanced, mirroring the main trainer.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = make_patch_classifier(n_classes, arch)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    labels = np.asarray(labels)
    by_class = [np.flatnonzero(labels == c) for c in range(n_classes)]
    by_class = [ix for ix in by_class if ix.size]
    per_class = max(1, batch_size // len(by_class))
    steps = max(1, len(patches) // batch_size)
    history = []
    for _ in range(epochs):
        model.train()
        for _ in range(steps):
            idx = np.concatenate([rng.choice(ix, per_class) for ix in by_class])
            x = image_to_tensor(np.stack([patches[i] for i in idx]))
            loss = F.cross_entropy(model(x), torch.as_tensor(labels[idx]))
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(loss.item())
    return model, history
