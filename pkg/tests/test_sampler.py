import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualattn.sampler import (NoiseConfig, SamplerConfig, final_attention, make_noise, map_to_slide,
                              positive_mask, sample_locations, sample_tiles, slide_to_grid, spatial_filter,
                              tissue_grid, tumor_mask)


def lloyd_oracle(values, k, iters=100):
    """Plain-loop Lloyd iterations with quantile seeding."""
    vals = list(map(float, values))
    srt = sorted(vals)
    cents = [float(np.quantile(srt, (i + 0.5) / k)) for i in range(k)]
    labels = [0] * len(vals)
    for _ in range(iters):
        for n, v in enumerate(vals):
            best, bd = 0, abs(v - cents[0])
            for j in range(1, k):
                d = abs(v - cents[j])
                if d < bd:
                    best, bd = j, d
            labels[n] = best
        new = []
        for j in range(k):
            m = [v for v, l in zip(vals, labels) if l == j]
            new.append(sum(m) / len(m) if m else cents[j])
        if new == cents:
            break
        cents = new
    top = max(range(k), key=lambda j: (cents[j], -j))
    return np.array([l == top for l in labels])


def test_noise_range_and_seed():
    cfg = NoiseConfig(-2.0, 1.0, seed=3)
    a = make_noise((50, 50), cfg)
    assert a.min() > -2.0 and a.max() <= 1.0
    np.testing.assert_array_equal(a, make_noise((50, 50), cfg))
    with pytest.raises(ValueError):
        NoiseConfig(1.0, 1.0)


def test_positive_mask_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.random((12, 9))
    w, off = 5, 0.02
    m = positive_mask(a, w, off)
    r = w // 2
    for i in range(12):
        for j in range(9):
            acc = 0.0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    ii, jj = i + di, j + dj
                    # reflect (half-sample symmetric) boundary
                    ii = -ii - 1 if ii < 0 else (2 * 12 - ii - 1 if ii >= 12 else ii)
                    jj = -jj - 1 if jj < 0 else (2 * 9 - jj - 1 if jj >= 9 else jj)
                    acc += a[ii, jj]
            assert m[i, j] == (a[i, j] > acc / w ** 2 - off)


def test_tumor_mask_matches_lloyd():
    rng = np.random.default_rng(1)
    for _ in range(30):
        a = rng.random((8, 8)) ** rng.uniform(0.5, 3)
        np.testing.assert_array_equal(tumor_mask(a, 3).mask.ravel(), lloyd_oracle(a.ravel(), 3))


def test_tumor_mask_fallback():
    a = np.zeros((4, 4))
    a[0, 0] = 1.0
    res = tumor_mask(a, 3)
    assert res.fallback and res.mask[0, 0] and res.mask.sum() == 1


def test_final_attention_identity():
    rng = np.random.default_rng(2)
    m = rng.random((6, 6)) > 0.5
    n, a = rng.random((6, 6)), rng.random((6, 6))
    np.testing.assert_allclose(final_attention(m, n, a), m * n + m * a)
    assert np.all(final_attention(m, n, a)[~m] == 0)


def test_sample_locations_sort_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        f = rng.random((7, 5)) - 0.3
        got = sample_locations(f, 8)
        cells = sorted(((-f[y, x], y * 5 + x, (x, y)) for y in range(7) for x in range(5) if f[y, x] > 0))
        assert got == [c[2] for c in cells[:8]]


@given(st.lists(st.tuples(st.integers(0, 40), st.integers(0, 40)), min_size=1, max_size=40, unique=True),
       st.floats(1.0, 12.0), st.integers(1, 10))
@settings(max_examples=150, deadline=None)
def test_spatial_filter_properties(points, d_t, n):
    res = spatial_filter(points, d_t, n)
    locs = res.locations
    assert len(locs) == min(n, len(points))
    assert len(set(locs)) == len(locs)
    if not res.relaxed:
        for i in range(len(locs)):
            for j in range(i + 1, len(locs)):
                assert math.dist(locs[i], locs[j]) > d_t


def test_spatial_filter_relaxes_once():
    pts = [(0, 0), (3, 0), (6, 0), (9, 0)]
    res = spatial_filter(pts, 4.0, 4)
    assert res.relaxed
    assert res.locations[:2] == [(0, 0), (6, 0)]
    assert sorted(res.locations) == sorted(pts)


def test_map_to_slide_roundtrip():
    pts = [(0, 0), (3, 7), (63, 1)]
    base = map_to_slide(pts, 32, 8)
    assert base == [(0, 0), (768, 1792), (16128, 256)]
    assert slide_to_grid(base, 32, 8) == pts
    with pytest.raises(ValueError):
        map_to_slide(pts, 0, 8)


def test_distance_threshold_default():
    # a 2048 px tile spans 8 grid cells at s=32, pool=8; centres must be more than 4 apart
    assert SamplerConfig().distance_threshold == 4.0
    assert SamplerConfig(d_t=3).distance_threshold == 3.0
    with pytest.raises(ValueError):
        SamplerConfig(mask_mode="bogus")


def test_sample_tiles_on_slide(small_slides):
    from dualattn.pyramid import downsample, tissue_mask

    slide, spec = small_slides[3]
    low = downsample(slide, 32)
    grid = tissue_grid(tissue_mask(low).mask, 8)
    probs = np.random.default_rng(0).random(grid.shape)
    probs /= probs.sum()
    cfg = SamplerConfig(n_tiles=4)
    a = sample_tiles(slide, probs, grid, cfg, np.random.default_rng(5))
    b = sample_tiles(slide, probs, grid, cfg, np.random.default_rng(5))
    assert a.tiles.locations_base == b.tiles.locations_base
    assert len(a.tiles) == 4
    for (r, c) in a.grid_indices:
        assert a.mask[r, c] and grid[r, c]
    for t in a.tiles.tiles:
        assert t.shape == (128, 128, 3)
    assert a.debug_dict()["L_F"] == [list(p) for p in a.tiles.locations_lowres]


def test_negative_noise_leaves_cells_unselectable():
    f = final_attention(np.ones((4, 4), bool), np.full((4, 4), -2.0), np.full((4, 4), 0.5))
    assert sample_locations(f, 5) == []
