"""Per-tile glimpse environment: multi-resolution glimpses and inhibition of return.

Locations are normalized tile coordinates ``(x, y)`` in [-1, 1]^2 with
``x`` along columns; pixel centre = ``(x + 1) / 2 * width``.
"""
import copy
from dataclasses import dataclass, field

import numpy as np

from .pyramid import block_mean, to_uint8


class EpisodeFinished(RuntimeError):
    pass


# ---------------------------------------------------------------- dihedral

def dihedral(image, k):
    """Apply element ``k`` (0..7) of the square's symmetry group: ``k % 4``
    quarter turns counter-clockwise, then a horizontal flip if ``k >= 4``."""
    out = np.rot90(image, k % 4, axes=(0, 1))
    if k >= 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def dihedral_point(loc, k):
    """Where a normalized point lands after ``dihedral(., k)``."""
    x, y = float(loc[0]), float(loc[1])
    for _ in range(k % 4):
        x, y = y, -x
    if k >= 4:
        x = -x
    return x, y


def dihedral_point_inverse(loc, k):
    x, y = float(loc[0]), float(loc[1])
    if k >= 4:
        x = -x
    for _ in range(k % 4):
        x, y = -y, x
    return x, y


# ------------------------------------------------------------- tile sources

def to_pixel(loc, width, height):
    return (loc[0] + 1.0) / 2.0 * width, (loc[1] + 1.0) / 2.0 * height


def crop_origin(c, footprint, scale=1):
    """Top-left of a ``footprint`` wide crop centred near ``c``.

    Snapped down to a multiple of ``scale`` so a downsampled crop covers whole
    pyramid pixels.
    """
    x0 = int(np.floor(c + 0.5)) - footprint // 2
    return x0 - x0 % scale


def crop_centered(image, cx, cy, size, scale=1):
    """``size x size`` crop centred at pixel ``(cx, cy)``, zero-padded."""
    h, w = image.shape[:2]
    x0, y0 = crop_origin(cx, size, scale), crop_origin(cy, size, scale)
    out = np.zeros((size, size) + image.shape[2:], dtype=image.dtype)
    ix0, iy0 = max(x0, 0), max(y0, 0)
    ix1, iy1 = min(x0 + size, w), min(y0 + size, h)
    if ix0 < ix1 and iy0 < iy1:
        out[iy0 - y0:iy1 - y0, ix0 - x0:ix1 - x0] = image[iy0:iy1, ix0:ix1]
    return out


class ArrayTile:
    """A full-resolution tile held in memory."""

    def __init__(self, raster, context_size=128):
        self.raster = np.asarray(raster)
        self.context_size = context_size

    @property
    def size(self):
        return self.raster.shape[1], self.raster.shape[0]

    def crop(self, loc, size, scale):
        w, h = self.size
        cx, cy = to_pixel(loc, w, h)
        region = crop_centered(self.raster, cx, cy, size * scale, scale)
        return region if scale == 1 else to_uint8(block_mean(region, scale))

    def context(self):
        w, h = self.size
        f = max(1, w // self.context_size)
        return to_uint8(block_mean(self.raster, f))[:self.context_size, :self.context_size]


class SlideTile:
    """A tile window on a slide pyramid, read lazily glimpse by glimpse.

    ``augment`` is a dihedral element applied to everything the agent sees;
    areas outside the window are zero, matching ``ArrayTile``.
    """

    def __init__(self, slide, top_left, tile_size=2048, context_size=128, augment=0):
        self.slide = slide
        self.top_left = (int(top_left[0]), int(top_left[1]))
        self.tile_size = int(tile_size)
        self.context_size = int(context_size)
        self.augment = int(augment)

    @property
    def size(self):
        return self.tile_size, self.tile_size

    def _read(self, scale, cx, cy, size, align=None):
        k = self.slide.scale_index(scale)
        foot = size * scale
        align = align or scale
        x0, y0 = crop_origin(cx, foot, align), crop_origin(cy, foot, align)
        try:
            out = self.slide.read_region(k, (self.top_left[0] + x0, self.top_left[1] + y0), (size, size))
        except ValueError:  # glimpse lies entirely off the slide
            return np.zeros((size, size, 3), np.uint8)
        # blank whatever falls outside the tile window
        lo_x = max(0, -x0) // scale
        lo_y = max(0, -y0) // scale
        hi_x = size - max(0, x0 + foot - self.tile_size) // scale
        hi_y = size - max(0, y0 + foot - self.tile_size) // scale
        keep = np.zeros((size, size), bool)
        keep[lo_y:max(lo_y, hi_y), lo_x:max(lo_x, hi_x)] = True
        out[~keep] = 0
        return out

    def crop(self, loc, size, scale):
        src = dihedral_point_inverse(loc, self.augment)
        cx, cy = to_pixel(src, self.tile_size, self.tile_size)
        if scale in self.slide.level_scale:
            region = self._read(scale, cx, cy, size)
        else:
            region = to_uint8(block_mean(self._read(1, cx, cy, size * scale, align=scale), scale))
        return dihedral(region, self.augment)

    def context(self):
        ratio = self.tile_size // self.context_size
        k = self.slide.scale_index(ratio)
        raw = self.slide.read_region(k, self.top_left, (self.context_size, self.context_size))
        return dihedral(raw, self.augment)


def as_tile(tile):
    return tile if hasattr(tile, "crop") else ArrayTile(tile)


# ------------------------------------------------------------------ glimpses

@dataclass
class GlimpsePair:
    g40: np.ndarray
    g20: np.ndarray
    loc: tuple


def extract_glimpse_pair(tile, loc, size=128):
    """A ``size`` crop at full resolution and a 2x wider crop averaged down to ``size``."""
    x, y = float(loc[0]), float(loc[1])
    if not (-1.0 <= x <= 1.0 and -1.0 <= y <= 1.0):
        raise ValueError(f"location {loc} outside [-1, 1]^2")
    tile = as_tile(tile)
    return GlimpsePair(tile.crop((x, y), size, 1), tile.crop((x, y), size, 2), (x, y))


@dataclass
class GlimpseState:
    tile: object
    tile_down: np.ndarray
    step: int = 0
    visited: list = field(default_factory=list)
    loc: tuple = (0.0, 0.0)
    predictions: list = field(default_factory=list)
    locations: list = field(default_factory=list)


def ior_box(loc, context_shape, tile_size, glimpse_size=128):
    """Integer box ``(x0, y0, x1, y1)`` of a full-resolution glimpse in context pixels."""
    h, w = context_shape[:2]
    ratio = w / tile_size
    side = glimpse_size * ratio
    cx, cy = to_pixel(loc, w, h)
    x0 = int(np.floor(cx - side / 2 + 0.5))
    y0 = int(np.floor(cy - side / 2 + 0.5))
    n = max(1, int(round(side)))
    return max(x0, 0), max(y0, 0), min(x0 + n, w), min(y0 + n, h)


def apply_ior(state, loc, glimpse_size=128):
    """Black out the glimpse footprint at ``loc`` in the context image (new state)."""
    new = copy.copy(state)
    new.tile_down = state.tile_down.copy()
    new.visited = list(state.visited)
    box = ior_box(loc, new.tile_down.shape, as_tile(state.tile).size[0], glimpse_size)
    x0, y0, x1, y1 = box
    new.tile_down[y0:y1, x0:x1] = 0
    new.visited.append(box)
    return new


class GlimpseEnv:
    """One episode of ``T`` glimpses on one tile."""

    def __init__(self, tile, T=6, glimpse_size=128, keep_states=False):
        if T < 1:
            raise ValueError("T must be >= 1")
        self.tile = as_tile(tile)
        self.T = T
        self.glimpse_size = glimpse_size
        self.keep_states = keep_states
        self.states = []
        self.state = None

    def reset(self, first_loc):
        self.state = GlimpseState(self.tile, self.tile.context().copy(), loc=tuple(map(float, first_loc)))
        self.state.locations.append(self.state.loc)
        self.states = []
        return extract_glimpse_pair(self.tile, self.state.loc, self.glimpse_size)

    @property
    def done(self):
        return self.state is not None and self.state.step >= self.T

    def peek_context(self):
        """Context image with the current glimpse already blacked out."""
        return apply_ior(self.state, self.state.loc, self.glimpse_size).tile_down

    def step(self, next_loc, predicted):
        """Record the prediction, inhibit the current location, then move.

        ``next_loc`` may be None on the final step. Returns the new glimpse
        pair (None once the episode ends).
        """
        if self.state is None:
            raise RuntimeError("call reset() first")
        if self.state.step >= self.T:
            raise EpisodeFinished(f"episode already has {self.T} steps")
        st = apply_ior(self.state, self.state.loc, self.glimpse_size)
        st.predictions = st.predictions + [predicted]
        st.step += 1
        if self.keep_states:
            self.states.append(st)
        self.state = st
        if st.step >= self.T or next_loc is None:
            return None
        st.loc = tuple(map(float, next_loc))
        st.locations = st.locations + [st.loc]
        return extract_glimpse_pair(self.tile, st.loc, self.glimpse_size)
