"""Attention sampling: noisy masked attention -> N distinct full-resolution tiles.

Grid coordinates are ``(x, y)`` = (column, row) on the attention grid.
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .pyramid import block_mean, to_uint8
from .soft_attention import minmax_normalize


@dataclass
class NoiseConfig:
    low: float = 0.0
    high: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.high > self.low:
            raise ValueError(f"noise range needs high > low, got ({self.low}, {self.high}]")


def make_noise(shape, cfg, rng=None):
    """I.i.d. uniform noise on ``(low, high]``; seeded by ``cfg.seed`` unless ``rng`` is given."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    u = rng.random(shape)  # [0, 1)
    return cfg.high - u * (cfg.high - cfg.low)


def positive_mask(a_bar, window=31, offset=0.02):
    """Adaptive threshold: keep cells above their local mean minus ``offset``."""
    a_bar = np.asarray(a_bar, dtype=np.float64)
    local = ndimage.uniform_filter(a_bar, size=window, mode="reflect")
    return a_bar > local - offset


@dataclass
class KMeansResult:
    mask: np.ndarray
    centroids: np.ndarray
    labels: np.ndarray
    fallback: bool = False
    iterations: int = 0


def kmeans_init(values, k):
    """Deterministic 1-D seeding: centroids at the (i + 0.5)/k quantiles."""
    return np.quantile(values, (np.arange(k) + 0.5) / k)


def tumor_mask(a_bar, k=3, max_iter=100):
    """1-D k-means on attention values; mask = the highest-centroid cluster.

    Falls back to a midpoint threshold when there are fewer than ``k``
    distinct values.
    """
    a_bar = np.asarray(a_bar, dtype=np.float64)
    values = a_bar.ravel()
    if np.unique(values).size < k:
        mid = 0.5 * (values.min() + values.max())
        return KMeansResult(a_bar > mid, np.array([mid]), (values > mid).astype(int).reshape(a_bar.shape),
                            fallback=True)
    centroids = kmeans_init(values, k)
    labels = np.zeros(values.size, dtype=int)
    it = 0
    for it in range(1, max_iter + 1):
        # argmin picks the lowest index on ties
        labels = np.argmin(np.abs(values[:, None] - centroids[None, :]), axis=1)
        new = centroids.copy()
        for j in range(k):
            members = values[labels == j]
            if members.size:
                new[j] = members.mean()
        if np.array_equal(new, centroids):
            break
        centroids = new
    top = int(np.argmax(centroids))
    labels = labels.reshape(a_bar.shape)
    return KMeansResult(labels == top, centroids, labels, iterations=it)


def final_attention(m, n, a_bar):
    """``m * n + m * a_bar``: noise and attention, both confined to the mask."""
    m = np.asarray(m, dtype=np.float64)
    return m * np.asarray(n, dtype=np.float64) + m * np.asarray(a_bar, dtype=np.float64)


def sample_locations(f_a, count):
    """The ``count`` strictly positive cells of largest value, descending.

    Ties are broken by row-major index. Returns ``(x, y)`` pairs.
    """
    f_a = np.asarray(f_a, dtype=np.float64)
    flat = f_a.ravel()
    pos = np.flatnonzero(flat > 0)
    order = pos[np.argsort(-flat[pos], kind="stable")][:count]
    rows, cols = np.unravel_index(order, f_a.shape)
    return [(int(x), int(y)) for y, x in zip(rows, cols)]


@dataclass
class FilterResult:
    locations: list
    relaxed: bool = False
    filled: bool = False


def spatial_filter(locations, d_t, n):
    """Greedy selection of up to ``n`` points with pairwise distance > ``d_t``.

    If fewer than ``n`` survive, ``d_t`` is halved once and the rejected
    points are rescanned; any shortfall after that is filled with the
    remaining distinct points in order.
    """
    pts = [tuple(p) for p in locations]
    accepted = []

    def scan(candidates, thresh):
        rest = []
        for p in candidates:
            if len(accepted) >= n:
                rest.append(p)
                continue
            if all(math.dist(p, q) > thresh for q in accepted):
                accepted.append(p)
            else:
                rest.append(p)
        return rest

    rejected = scan(pts, d_t)
    if len(accepted) >= n:
        return FilterResult(accepted)
    rejected = scan(rejected, d_t / 2)
    filled = False
    for p in rejected:
        if len(accepted) >= n:
            break
        if p not in accepted:
            accepted.append(p)
            filled = True
    return FilterResult(accepted, relaxed=True, filled=filled)


def map_to_slide(locations, s, pool):
    """Grid ``(x, y)`` -> base-level tile centre ``(x * s * pool, y * s * pool)``."""
    if s < 1 or pool < 1:
        raise ValueError("scale factor and pool size must be >= 1")
    return [(int(x) * s * pool, int(y) * s * pool) for x, y in locations]


def slide_to_grid(points, s, pool):
    """Inverse of ``map_to_slide``: base coordinates -> containing grid cell."""
    step = s * pool
    return [(int(X) // step, int(Y) // step) for X, Y in points]


def tissue_grid(mask, pool, min_fraction=0.5):
    """Tissue mask at I_0 resolution -> attention grid (cell kept if mostly tissue)."""
    return block_mean(np.asarray(mask, dtype=np.float64), pool) >= min_fraction


@dataclass
class TileSet:
    locations_lowres: list
    locations_base: list
    tiles: list
    attention_values: list
    tile_size_base: int = 2048
    tile_size_model: int = 128

    def __len__(self):
        return len(self.locations_base)

    def windows(self):
        """Base-level top-left corner of each tile window."""
        half = self.tile_size_base // 2
        return [(X - half, Y - half) for X, Y in self.locations_base]


def read_tile(slide, center, tile_size_base=2048, tile_size_model=128):
    """Read a ``tile_size_base`` window centred at ``center`` at model resolution.

    Uses the pyramid level whose scale equals the resize ratio when there is
    one; otherwise reads the finest level and block-averages. Edges are
    zero-padded.
    """
    ratio = tile_size_base // tile_size_model
    half = tile_size_base // 2
    top_left = (center[0] - half, center[1] - half)
    if ratio in slide.level_scale:
        return slide.read_region(slide.level_scale.index(ratio), top_left, (tile_size_model, tile_size_model))
    k = max(i for i, s in enumerate(slide.level_scale) if ratio % s == 0)
    s = slide.level_scale[k]
    region = slide.read_region(k, top_left, (tile_size_base // s, tile_size_base // s))
    return to_uint8(block_mean(region, ratio // s))


def extract_tiles(slide, coords, locations_lowres=None, attention_values=None,
                  tile_size_base=2048, tile_size_model=128):
    """Read the tile for every base coordinate, in coordinate order."""
    tiles = [read_tile(slide, c, tile_size_base, tile_size_model) for c in coords]
    return TileSet(
        locations_lowres=list(locations_lowres) if locations_lowres is not None else [],
        locations_base=[tuple(c) for c in coords],
        tiles=tiles,
        attention_values=list(attention_values) if attention_values is not None else [1.0] * len(coords),
        tile_size_base=tile_size_base,
        tile_size_model=tile_size_model,
    )


@dataclass
class SamplerConfig:
    """Attention-sampling parameters.

    ``mask_mode`` is ``"positive"`` (adaptive threshold) or ``"tumor"``
    (k-means). ``d_t`` of None means half a tile width on the grid.
    """

    n_tiles: int = 10
    mask_mode: str = "positive"
    noise_low: float = 0.0
    noise_high: float = 1.0
    window: int = 31
    offset: float = 0.02
    k_clusters: int = 3
    d_t: float | None = None
    scale: int = 32
    pool: int = 8
    tile_size_base: int = 2048
    tile_size_model: int = 128

    def __post_init__(self):
        if self.mask_mode not in ("positive", "tumor"):
            raise ValueError(f"mask_mode must be 'positive' or 'tumor', got {self.mask_mode!r}")
        NoiseConfig(self.noise_low, self.noise_high)

    @property
    def distance_threshold(self):
        if self.d_t is not None:
            return float(self.d_t)
        # half a tile width in grid units: neighbouring tiles overlap by at most half
        return self.tile_size_base / (2.0 * self.scale * self.pool)


@dataclass
class SampleResult:
    tiles: TileSet
    candidates: list
    grid_indices: list  # (row, col) of each selected cell
    mask: np.ndarray
    final: np.ndarray
    relaxed: bool = False
    extra: dict = field(default_factory=dict)

    def debug_dict(self):
        return {
            "L": [list(p) for p in self.candidates],
            "L_F": [list(p) for p in self.tiles.locations_lowres],
            "base_coordinates": [list(p) for p in self.tiles.locations_base],
            "attention_values": [float(a) for a in self.tiles.attention_values],
            "relaxed": bool(self.relaxed),
            "mask_cells": int(np.asarray(self.mask).sum()),
        }

    def dump(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.debug_dict(), fh, indent=2)


def refine_mask(a_bar, cfg):
    if cfg.mask_mode == "positive":
        return positive_mask(a_bar, cfg.window, cfg.offset)
    return tumor_mask(a_bar, cfg.k_clusters).mask


def sample_tiles(slide, probs, tissue, cfg, rng):
    """Full attention-sampling pipeline for one slide.

    ``probs`` is the attention grid (numpy), ``tissue`` the tissue mask on
    the same grid. Sampling is confined to ``refined mask & tissue``.
    """
    a_bar = minmax_normalize(probs)
    m = refine_mask(a_bar, cfg) & np.asarray(tissue, bool)
    if not m.any():
        # attention mask missed all tissue; fall back to the tissue itself
        m = np.asarray(tissue, bool).copy()
    noise = make_noise(a_bar.shape, NoiseConfig(cfg.noise_low, cfg.noise_high), rng=rng)
    f_a = final_attention(m, noise, a_bar)
    candidates = sample_locations(f_a, 2 * cfg.n_tiles)
    chosen = spatial_filter(candidates, cfg.distance_threshold, cfg.n_tiles)
    coords = map_to_slide(chosen.locations, cfg.scale, cfg.pool)
    probs = np.asarray(probs)
    att = [float(probs[y, x]) for x, y in chosen.locations]
    tiles = extract_tiles(slide, coords, chosen.locations, att, cfg.tile_size_base, cfg.tile_size_model)
    return SampleResult(tiles, candidates, [(y, x) for x, y in chosen.locations], m, f_a,
                        relaxed=chosen.relaxed)
