"""Multi-resolution slide pyramids, tissue masking and synthetic slides.

A slide on disk is a directory holding ``manifest.txt`` plus one PNG per
stored level. Synthetic slides keep only their coarse levels on disk: the
40x and 20x levels are rendered on demand from a stored "field" level and a
bank of zero-sum texture templates, so every fine level block-averages
exactly back to the field. That keeps a 16384^2 slide at a few megabytes.
"""
import math
import threading
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.color import rgb2gray
from skimage.filters import threshold_otsu
from skimage.morphology import closing, disk, opening

from . import kvfile

MANIFEST = "manifest.txt"
FORMAT_TAG = "dualattn-slide/1"


def block_mean(arr, factor):
    """Average ``factor x factor`` blocks; edge blocks average their valid pixels."""
    arr = np.asarray(arr, dtype=np.float64)
    if factor == 1:
        return arr.copy()
    h, w = arr.shape[:2]
    oh, ow = math.ceil(h / factor), math.ceil(w / factor)
    pad = ((0, oh * factor - h), (0, ow * factor - w)) + ((0, 0),) * (arr.ndim - 2)
    valid = np.pad(np.ones((h, w)), pad[:2])
    data = np.pad(arr, pad)
    tail = arr.shape[2:]
    sums = data.reshape(oh, factor, ow, factor, *tail).sum(axis=(1, 3))
    counts = valid.reshape(oh, factor, ow, factor).sum(axis=(1, 3))
    return sums / counts.reshape(oh, ow, *([1] * len(tail)))


def to_uint8(x):
    return np.clip(np.floor(np.asarray(x) + 0.5), 0, 255).astype(np.uint8)


def normalize_tag(tag):
    return str(tag).strip().lower().replace("×", "x")


class ReadLog:
    """Thread-safe tally of pixels read per pyramid level, in base-level pixels."""

    def __init__(self):
        self._lock = threading.Lock()
        self.base_pixels = {}
        self.calls = {}

    def add(self, level, base_pixels):
        with self._lock:
            self.base_pixels[level] = self.base_pixels.get(level, 0) + int(base_pixels)
            self.calls[level] = self.calls.get(level, 0) + 1

    def total(self, levels):
        with self._lock:
            return sum(self.base_pixels.get(k, 0) for k in levels)

    def reset(self):
        with self._lock:
            self.base_pixels.clear()
            self.calls.clear()


@dataclass
class ProceduralDetail:
    """Zero-sum texture added on top of a stored field level.

    A base pixel equals ``field[Y // F, X // F] + template[k][Y % F, X % F]``
    where ``F`` is the field scale and ``k`` a hash of the field cell. Each
    template sums to zero, so the field is the exact block mean of the base.
    """

    field_level: int
    templates: np.ndarray  # (K, F, F) int
    seed: int
    amplitude: int

    @classmethod
    def make(cls, field_level, field_scale, seed, amplitude, n_templates=8):
        rng = np.random.default_rng([seed, 7919])
        half = max(amplitude // 4, 1)
        n, c = n_templates, field_scale // 2
        # a zero-sum coarse part on 2x2 blocks, so the 2x level stays integer ...
        raw = rng.integers(-half, half + 1, size=(n, c, c))
        coarse = np.repeat(np.repeat(raw - raw[:, ::-1, ::-1], 2, 1), 2, 2)
        # ... plus fine patterns that sum to zero inside every 2x2 block
        w = rng.integers(-half, half + 1, size=(3, n, c, c))
        pats = np.array([[[1, -1], [-1, 1]], [[1, 1], [-1, -1]], [[1, -1], [1, -1]]])
        fine = sum(np.kron(w[i], pats[i]) for i in range(3))
        return cls(field_level, (coarse + fine).astype(np.int16), int(seed), int(amplitude))

    def cell_index(self, fy, fx):
        h = (fy.astype(np.int64) * 73856093) ^ (fx.astype(np.int64) * 19349663) ^ (self.seed * 83492791)
        return np.abs(h) % len(self.templates)


class SlidePyramid:
    """A read-only multi-level RGB slide.

    ``level_scale[k]`` is the downsample factor of level ``k`` relative to the
    base. Levels are either stored arrays or rendered through ``detail``.
    """

    def __init__(self, base_size, level_scale, magnification_tag, levels, detail=None, name=""):
        self.base_size = (int(base_size[0]), int(base_size[1]))
        self.level_scale = [int(s) for s in level_scale]
        self.magnification_tag = [normalize_tag(t) for t in magnification_tag]
        self._levels = list(levels)
        self.detail = detail
        self.name = name
        self.read_log = ReadLog()
        if self.level_scale[0] != 1:
            raise ValueError("level_scale[0] must be 1")
        if any(b <= a for a, b in zip(self.level_scale, self.level_scale[1:])):
            raise ValueError("level_scale must be strictly increasing")
        if not (len(self.level_scale) == len(self.magnification_tag) == len(self._levels)):
            raise ValueError("level_scale, magnification_tag and levels must have equal length")
        for k, lvl in enumerate(self._levels):
            if lvl is None:
                if detail is None:
                    raise ValueError(f"level {k} has no raster and no procedural detail")
                continue
            if lvl.shape[:2] != self.level_shape(k):
                raise ValueError(f"level {k} has shape {lvl.shape[:2]}, expected {self.level_shape(k)}")

    @classmethod
    def from_base(cls, base, level_scale=(1, 2, 4), magnification_tag=None, name=""):
        base = np.asarray(base, dtype=np.uint8)
        if magnification_tag is None:
            magnification_tag = [f"{40 / s:g}x" for s in level_scale]
        levels = [base if s == 1 else to_uint8(block_mean(base, s)) for s in level_scale]
        return cls(base.shape[:2], level_scale, magnification_tag, levels, name=name)

    @property
    def n_levels(self):
        return len(self.level_scale)

    def level_shape(self, k):
        s = self.level_scale[k]
        return math.ceil(self.base_size[0] / s), math.ceil(self.base_size[1] / s)

    def level_index(self, level_tag):
        if isinstance(level_tag, (int, np.integer)) and not isinstance(level_tag, bool):
            if 0 <= level_tag < self.n_levels:
                return int(level_tag)
            raise ValueError(f"unknown level index {level_tag}")
        tag = normalize_tag(level_tag)
        if tag in self.magnification_tag:
            return self.magnification_tag.index(tag)
        raise ValueError(f"unknown level tag {level_tag!r}; have {self.magnification_tag}")

    def scale_index(self, scale):
        if scale in self.level_scale:
            return self.level_scale.index(scale)
        raise ValueError(f"no level with scale {scale}; have {self.level_scale}")

    def is_stored(self, k):
        return self._levels[k] is not None

    def level(self, k):
        """Full raster of level ``k`` (rendered if procedural)."""
        if self._levels[k] is not None:
            return self._levels[k]
        h, w = self.level_shape(k)
        return self._render(k, 0, h, 0, w)

    def _render(self, k, y0, y1, x0, x1):
        d = self.detail
        fscale = self.level_scale[d.field_level]
        s = self.level_scale[k]
        if fscale % s:
            raise ValueError(f"procedural level scale {s} must divide field scale {fscale}")
        sub = d.templates if s == 1 else np.stack([block_mean(t, s) for t in d.templates])
        ys = np.arange(y0, y1) * s
        xs = np.arange(x0, x1) * s
        fy, fx = ys // fscale, xs // fscale
        sy, sx = (ys % fscale) // s, (xs % fscale) // s
        fld = self._levels[d.field_level][fy[:, None], fx[None, :]].astype(np.float64)
        idx = d.cell_index(fy[:, None], fx[None, :])
        tex = sub[idx, sy[:, None], sx[None, :]]
        return to_uint8(fld + tex[..., None])

    def _block(self, k, y0, y1, x0, x1):
        if self._levels[k] is not None:
            return self._levels[k][y0:y1, x0:x1]
        return self._render(k, y0, y1, x0, x1)

    def read_region(self, level_tag, top_left, size, log=True):
        """Read a ``size = (ph, pw)`` raster at a level.

        ``top_left = (X, Y)`` is in base-level pixels. Area outside the slide
        is zero-padded; a region with no overlap at all is an error.
        """
        k = self.level_index(level_tag)
        s = self.level_scale[k]
        ph, pw = int(size[0]), int(size[1])
        lx0, ly0 = int(top_left[0]) // s, int(top_left[1]) // s
        lh, lw = self.level_shape(k)
        ix0, iy0 = max(lx0, 0), max(ly0, 0)
        ix1, iy1 = min(lx0 + pw, lw), min(ly0 + ph, lh)
        if ix0 >= ix1 or iy0 >= iy1:
            raise ValueError(f"region {top_left} size {size} at level {level_tag} lies outside the slide")
        out = np.zeros((ph, pw, 3), dtype=np.uint8)
        out[iy0 - ly0:iy1 - ly0, ix0 - lx0:ix1 - lx0] = self._block(k, iy0, iy1, ix0, ix1)
        if log:
            self.read_log.add(k, ph * pw * s * s)
        return out


def downsample(slide, factor):
    """Slide raster downsampled by an integer ``factor`` relative to the base."""
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    factor = int(factor)
    if factor in slide.level_scale:
        return slide.level(slide.level_scale.index(factor)).copy()
    candidates = [k for k, s in enumerate(slide.level_scale) if factor % s == 0]
    stored = [k for k in candidates if slide.is_stored(k)]
    k = max(stored or candidates, key=lambda j: slide.level_scale[j])
    return to_uint8(block_mean(slide.level(k), factor // slide.level_scale[k]))


@dataclass
class TissueMask:
    mask: np.ndarray
    coverage: float
    degenerate: bool = False
    threshold: float | None = None


def grayscale(image):
    """Luminance in [0, 1] for an 8-bit RGB raster."""
    return rgb2gray(np.asarray(image, dtype=np.uint8))


def tissue_mask(image, radius=2):
    """Grayscale -> Otsu -> binary opening then closing with a disk of ``radius``."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an RGB raster, got shape {image.shape}")
    gray = grayscale(image)
    if gray.max() - gray.min() < 1e-12:
        warnings.warn("single-intensity image; tissue mask is empty", RuntimeWarning, stacklevel=2)
        return TissueMask(np.zeros(gray.shape, bool), 0.0, degenerate=True)
    t = float(threshold_otsu(gray))
    mask = gray <= t
    if radius > 0:
        fp = disk(radius)
        mask = closing(opening(mask, fp), fp)
    mask = mask.astype(bool)
    return TissueMask(mask, float(mask.mean()), threshold=t)


def apply_tissue_mask(image, mask, fill=255):
    """Replace non-tissue pixels with ``fill`` (white by default, like glass)."""
    out = np.array(image, copy=True)
    out[~np.asarray(mask, bool)] = fill
    return out


# ---------------------------------------------------------------- synthetic

@dataclass
class GeneratorConfig:
    """Parameters of the planted-ROI slide generator.

    The class of a slide is fixed by ``class_intensity[label]``: the fraction
    of brown chromogen mixed into the tumour colour inside the ROI.
    """

    base_size: int = 16384
    level_scale: tuple = (1, 2, 16, 32)
    magnification_tag: tuple = ("40x", "20x", "2.5x", "1.25x")
    field_level: int = 2
    downsample_factor: int = 32
    n_classes: int = 4
    class_intensity: tuple = (0.0, 0.35, 0.65, 0.95)
    roi_count: int = 2
    roi_radius: tuple = (0.06, 0.08)
    tissue_blobs: int = 3
    fold_count: int = 2
    detail_amplitude: int = 12
    stain_threshold: float = 0.1
    background_rgb: tuple = (236, 234, 238)
    tissue_rgb: tuple = (196, 158, 196)
    tumor_rgb: tuple = (156, 120, 190)
    stain_rgb: tuple = (146, 92, 44)
    fold_rgb: tuple = (92, 78, 98)

    def __post_init__(self):
        fscale = self.level_scale[self.field_level]
        if self.base_size % fscale:
            raise ValueError("base_size must be a multiple of the field level scale")
        if self.downsample_factor not in self.level_scale:
            raise ValueError("downsample_factor must be one of level_scale")
        if len(self.class_intensity) != self.n_classes:
            raise ValueError("class_intensity needs one entry per class")


@dataclass
class SyntheticSlideSpec:
    class_label: int
    roi_count: int
    roi_intensity: float
    seed: int
    roi_mask: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def for_class(cls, label, seed, config=None):
        config = config or GeneratorConfig()
        return cls(int(label), config.roi_count, float(config.class_intensity[label]), int(seed))


def stain_intensity(image):
    """Brown-chromogen proxy in [0, 1]: red minus blue, clipped at zero."""
    img = np.asarray(image, dtype=np.float64)
    return np.clip((img[..., 0] - img[..., 2]) / 255.0, 0.0, 1.0)


def _smooth_noise(rng, n, sigma):
    # blur at a coarse grid then upsample; same statistics, much cheaper
    step = max(1, min(8, int(sigma // 2)))
    m = -(-n // step)
    z = ndimage.gaussian_filter(rng.standard_normal((m, m)), sigma / step, mode="wrap")
    if step > 1:
        z = ndimage.zoom(z, step, order=1, mode="grid-wrap", grid_mode=True)[:n, :n]
    return z / (z.std() + 1e-12)


def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    c, s = math.cos(angle), math.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return np.sqrt(u * u + v * v)


def _render_field(spec, cfg, n, rng):
    yy, xx = np.mgrid[0:n, 0:n] / n
    tissue = np.zeros((n, n), bool)
    for _ in range(cfg.tissue_blobs):
        cy, cx = rng.uniform(0.35, 0.65, 2)
        ry, rx = rng.uniform(0.2, 0.32, 2)
        wobble = 0.12 * _smooth_noise(rng, n, n / 24)
        tissue |= _ellipse(yy, xx, cy, cx, ry, rx, rng.uniform(0, math.pi)) < 1 + wobble
    tissue = ndimage.binary_fill_holes(tissue)

    roi = np.zeros((n, n), bool)
    depth = ndimage.distance_transform_edt(tissue) / n
    for _ in range(spec.roi_count):
        r = rng.uniform(*cfg.roi_radius)
        free = ndimage.distance_transform_edt(~roi) / n if roi.any() else np.full((n, n), np.inf)
        ok = (depth > 1.15 * r) & (free > 1.1 * r)
        if not ok.any():
            ok = depth > 0.5 * r
        ys, xs = np.nonzero(ok)
        i = rng.integers(len(ys))
        blob = _ellipse(yy, xx, ys[i] / n, xs[i] / n, r, r * rng.uniform(0.75, 1.0), rng.uniform(0, math.pi))
        roi |= (blob < 1 + 0.08 * _smooth_noise(rng, n, n / 40)) & tissue

    folds = np.zeros((n, n), bool)
    for _ in range(cfg.fold_count):
        p = rng.uniform(0.25, 0.75, size=(3, 2))
        t = np.linspace(0, 1, 4 * n)[:, None]
        curve = (1 - t) ** 2 * p[0] + 2 * (1 - t) * t * p[1] + t ** 2 * p[2]
        pts = np.clip((curve * n).astype(int), 0, n - 1)
        line = np.zeros((n, n), bool)
        line[pts[:, 0], pts[:, 1]] = True
        folds |= ndimage.distance_transform_edt(~line) <= max(1, n // 160)
    near_roi = ndimage.distance_transform_edt(~roi) <= max(1, n // 64) if roi.any() else roi
    folds &= tissue & ~near_roi

    img = np.empty((n, n, 3))
    img[:] = cfg.background_rgb
    texture = 10.0 * _smooth_noise(rng, n, 2.0)[..., None]
    img[tissue] = (np.asarray(cfg.tissue_rgb) + texture[tissue])
    w = spec.roi_intensity
    roi_rgb = (1 - w) * np.asarray(cfg.tumor_rgb, float) + w * np.asarray(cfg.stain_rgb, float)
    img[roi] = roi_rgb + 0.6 * texture[roi]
    img[folds] = np.asarray(cfg.fold_rgb) + 0.5 * texture[folds]
    img += rng.normal(0, 2.0, size=img.shape)
    lo = cfg.detail_amplitude
    return to_uint8(np.clip(img, lo, 255 - lo)), roi


def generate_synthetic_slide(spec, config=None):
    """Render a deterministic planted-ROI slide for ``spec``.

    Returns ``(pyramid, spec)`` where the returned spec carries ``roi_mask``
    at ``config.downsample_factor`` resolution.
    """
    cfg = config or GeneratorConfig()
    fscale = cfg.level_scale[cfg.field_level]
    n = cfg.base_size // fscale
    rng = np.random.default_rng([spec.seed, spec.class_label])
    fld, roi = _render_field(spec, cfg, n, rng)
    detail = ProceduralDetail.make(cfg.field_level, fscale, spec.seed, cfg.detail_amplitude)
    # keep field + texture inside [0, 255] so no level is altered by clipping
    margin = int(np.abs(detail.templates).max())
    fld = np.clip(fld, margin, 255 - margin).astype(np.uint8)

    levels = []
    for k, s in enumerate(cfg.level_scale):
        if s < fscale:
            levels.append(None)
        elif s == fscale:
            levels.append(fld)
        else:
            levels.append(to_uint8(block_mean(fld, s // fscale)))
    slide = SlidePyramid((cfg.base_size, cfg.base_size), cfg.level_scale, cfg.magnification_tag,
                         levels, detail=detail)
    f = cfg.downsample_factor // fscale
    roi_low = block_mean(roi.astype(float), f) >= 0.5 if f > 1 else roi.copy()
    return slide, replace(spec, roi_mask=roi_low)


# ------------------------------------------------------------------ storage

def save_slide(slide, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT_TAG,
        "base_height": slide.base_size[0],
        "base_width": slide.base_size[1],
        "levels": slide.n_levels,
    }
    for k in range(slide.n_levels):
        meta[f"scale_{k}"] = slide.level_scale[k]
        meta[f"mag_{k}"] = slide.magnification_tag[k]
        if slide.is_stored(k):
            fname = f"level_{k}.png"
            Image.fromarray(slide.level(k)).save(directory / fname, optimize=False, compress_level=1)
            meta[f"file_{k}"] = fname
        else:
            meta[f"file_{k}"] = "procedural"
    if slide.detail is not None:
        meta["detail_field_level"] = slide.detail.field_level
        meta["detail_seed"] = slide.detail.seed
        meta["detail_amplitude"] = slide.detail.amplitude
        meta["detail_templates"] = len(slide.detail.templates)
    kvfile.write(directory / MANIFEST, meta, header="slide manifest")
    return directory


def load_slide(directory):
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no slide manifest at {path}")
    meta = kvfile.read(path)
    if meta.get("format") != FORMAT_TAG:
        raise ValueError(f"{path}: unsupported slide format {meta.get('format')!r}")
    n = int(meta["levels"])
    scales = [int(meta[f"scale_{k}"]) for k in range(n)]
    tags = [str(meta[f"mag_{k}"]) for k in range(n)]
    levels = []
    for k in range(n):
        fname = meta[f"file_{k}"]
        if fname == "procedural":
            levels.append(None)
        else:
            levels.append(np.asarray(Image.open(directory / fname).convert("RGB")))
    detail = None
    if "detail_field_level" in meta:
        fl = int(meta["detail_field_level"])
        detail = ProceduralDetail.make(fl, scales[fl], int(meta["detail_seed"]),
                                       int(meta["detail_amplitude"]), int(meta["detail_templates"]))
    return SlidePyramid((meta["base_height"], meta["base_width"]), scales, tags, levels,
                        detail=detail, name=directory.name)
