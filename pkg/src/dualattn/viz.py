"""File-only figures: attention overlays and glimpse contact sheets."""
import numpy as np
from PIL import Image, ImageDraw

from .glimpse_env import extract_glimpse_pair, to_pixel
from .soft_attention import minmax_normalize


def attention_png(probs, path):
    """Min-max normalized attention as a 16-bit grayscale PNG."""
    a = minmax_normalize(probs)
    Image.fromarray(np.round(a * 65535).astype(np.uint16)).save(path)
    return path


def _colormap(a):
    from matplotlib import colormaps

    return (colormaps["inferno"](a)[..., :3] * 255).astype(np.uint8)


def attention_overlay(image, probs, path=None, alpha=0.5, selected=None, pool=8):
    """Blend the upsampled attention heat map over the low-resolution image.

    ``selected`` is an optional list of ``(x, y)`` grid cells to outline.
    """
    image = np.asarray(image, dtype=np.uint8)
    heat = _colormap(minmax_normalize(probs))
    heat = np.asarray(Image.fromarray(heat).resize((image.shape[1], image.shape[0]), Image.NEAREST))
    out = Image.fromarray(((1 - alpha) * image + alpha * heat).astype(np.uint8))
    if selected:
        draw = ImageDraw.Draw(out)
        for x, y in selected:
            draw.rectangle([x * pool, y * pool, (x + 1) * pool - 1, (y + 1) * pool - 1], outline=(0, 255, 0))
    if path is not None:
        out.save(path)
    return np.asarray(out)


def contact_sheet(tile, locations, path=None, glimpse_size=128, scores=None):
    """Context image with the glimpse path, followed by each 40x/20x glimpse pair."""
    ctx = np.asarray(tile.context(), dtype=np.uint8)
    canvas = Image.fromarray(ctx).resize((glimpse_size, glimpse_size), Image.NEAREST)
    draw = ImageDraw.Draw(canvas)
    pts = [to_pixel(l, glimpse_size, glimpse_size) for l in locations]
    if len(pts) > 1:
        draw.line(pts, fill=(0, 255, 0), width=1)
    half = glimpse_size * glimpse_size / tile.size[0] / 2
    for px, py in pts:
        draw.rectangle([px - half, py - half, px + half, py + half], outline=(255, 255, 0))
    cols = [np.asarray(canvas)]
    for i, loc in enumerate(locations):
        pair = extract_glimpse_pair(tile, loc, glimpse_size)
        col = np.concatenate([pair.g40, pair.g20], 0)
        if scores is not None:
            img = Image.fromarray(col)
            ImageDraw.Draw(img).text((2, 2), str(scores[i]), fill=(255, 255, 255))
            col = np.asarray(img)
        cols.append(col)
    height = 2 * glimpse_size
    cols = [np.pad(c, ((0, height - c.shape[0]), (0, 2), (0, 0))) for c in cols]
    sheet = np.concatenate(cols, 1)
    if path is not None:
        Image.fromarray(sheet).save(path)
    return sheet
