"""Synthetic dataset directories and their in-memory slide records.

Layout::

    <root>/labels.csv          slide_id,label,seed
    <root>/generator.txt       generator settings used
    <root>/slides/<id>/        slide pyramid (manifest + PNG levels)
    <root>/masks/<id>.png      ground-truth ROI mask at the downsampled resolution
"""
import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import kvfile
from .pyramid import (GeneratorConfig, SyntheticSlideSpec, apply_tissue_mask, block_mean, downsample,
                      generate_synthetic_slide, load_slide, save_slide, tissue_mask)
from .sampler import tissue_grid


class DataError(RuntimeError):
    pass


def slide_ids(n):
    return [f"slide_{i:03d}" for i in range(n)]


def synthesize(root, generator=None, n_slides=60, seed=0):
    """Write ``n_slides`` class-balanced synthetic slides under ``root``."""
    cfg = generator or GeneratorConfig()
    root = Path(root)
    (root / "slides").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    rows = []
    for i, sid in enumerate(slide_ids(n_slides)):
        label = i % cfg.n_classes
        slide_seed = seed * 100_003 + i
        slide, spec = generate_synthetic_slide(SyntheticSlideSpec.for_class(label, slide_seed, cfg), cfg)
        save_slide(slide, root / "slides" / sid)
        Image.fromarray(spec.roi_mask.astype(np.uint8) * 255).save(root / "masks" / f"{sid}.png")
        rows.append((sid, label, slide_seed))
    with open(root / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["slide_id", "label", "seed"])
        w.writerows(rows)
    gen = {k: v for k, v in dataclasses.asdict(cfg).items()}
    kvfile.write(root / "generator.txt", gen, header="synthetic generator settings")
    return root


def read_labels(root):
    path = Path(root) / "labels.csv"
    if not path.exists():
        raise DataError(f"labels file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        return [(r["slide_id"], int(r["label"])) for r in csv.DictReader(fh)]


@dataclass
class SlideItem:
    """One slide with everything the pipeline needs at low resolution."""

    slide_id: str
    label: int
    slide: object
    image: np.ndarray  # tissue-masked I_0
    tissue: np.ndarray  # tissue mask at I_0 resolution
    tissue_grid: np.ndarray  # tissue on the attention grid
    roi_mask: np.ndarray | None = None
    fold: int = 0

    def roi_grid(self, pool):
        if self.roi_mask is None:
            return None
        g = block_mean(self.roi_mask.astype(np.float64), pool) >= 0.5
        return g[:self.tissue_grid.shape[0], :self.tissue_grid.shape[1]]


def make_item(slide_id, label, slide, factor=32, pool=8, roi_mask=None):
    low = downsample(slide, factor)
    tm = tissue_mask(low)
    if not tm.mask.any():
        raise DataError(f"{slide_id}: no tissue found")
    grid = tissue_grid(tm.mask, pool)
    if not grid.any():
        grid = block_mean(tm.mask.astype(float), pool) > 0
    return SlideItem(slide_id, int(label), slide, apply_tissue_mask(low, tm.mask), tm.mask, grid, roi_mask)


def load_dataset(root, factor=32, pool=8):
    root = Path(root)
    items = []
    for sid, label in read_labels(root):
        sdir = root / "slides" / sid
        if not sdir.exists():
            raise DataError(f"slide directory missing: {sdir}")
        slide = load_slide(sdir)
        mpath = root / "masks" / f"{sid}.png"
        roi = np.asarray(Image.open(mpath)) > 127 if mpath.exists() else None
        items.append(make_item(sid, label, slide, factor, pool, roi))
    if not items:
        raise DataError(f"no slides listed in {root / 'labels.csv'}")
    return items


def make_folds(labels, n_folds, seed=0):
    """Class-stratified fold ids: each class is shuffled and dealt round-robin."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds = np.zeros(labels.size, dtype=int)
    offset = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = (np.arange(idx.size) + offset) % n_folds
        offset += idx.size
    return folds


def split(items, n_folds, test_fold, val_fold, seed=0):
    """Assign folds and return ``(train, val, test)`` item lists."""
    if test_fold == val_fold:
        raise ValueError("test and validation folds must differ")
    folds = make_folds([it.label for it in items], n_folds, seed)
    for it, f in zip(items, folds):
        it.fold = int(f)
    train = [it for it in items if it.fold not in (test_fold, val_fold)]
    val = [it for it in items if it.fold == val_fold]
    test = [it for it in items if it.fold == test_fold]
    return train, val, test
