"""Four-panel PNG: original, heatmap overlay, relevant region, complement."""
import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from msilax.errors import DimensionError
from msilax.metrics import above, apply_mask, at_or_below


def hot_lut():
    """256-entry "hot" colour map: red, then yellow, then white."""
    x = np.arange(256) / 255.0
    rgb = np.stack([np.clip(3 * x, 0, 1), np.clip(3 * x - 1, 0, 1), np.clip(3 * x - 2, 0, 1)], axis=1)
    return np.round(rgb * 255).astype(np.uint8)


HOT = hot_lut()


def _gray(img):
    g = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=2)


def overlay(image, heat):
    """Equal blend of the grayscale image and the colour-mapped heatmap."""
    idx = np.round(np.clip(heat, 0, 1) * 255).astype(np.intp)
    blend = 0.5 * _gray(image).astype(np.float64) + 0.5 * HOT[idx].astype(np.float64)
    return np.round(blend).astype(np.uint8)


def render_panels(image, heat, alpha_min=0.5, scale=1, gutter=2):
    """(H*scale, 4*W*scale + 3*gutter, 3) uint8 array; gutters are white."""
    image = np.asarray(image, np.float32)
    if image.ndim == 3:
        image = image[0]
    heat = np.asarray(heat, np.float32)
    if image.shape != heat.shape:
        raise DimensionError(f"heatmap {heat.shape} does not match image {image.shape}")
    panels = [
        _gray(image),
        overlay(image, heat),
        _gray(apply_mask(image, heat, above(alpha_min))),
        _gray(apply_mask(image, heat, at_or_below(alpha_min))),
    ]
    if scale > 1:
        panels = [p.repeat(scale, 0).repeat(scale, 1) for p in panels]
    h = panels[0].shape[0]
    sep = np.full((h, gutter, 3), 255, np.uint8)
    parts = []
    for i, p in enumerate(panels):
        if i:
            parts.append(sep)
        parts.append(p)
    return np.concatenate(parts, axis=1)


def save_png(array, path, text=None):
    info = PngInfo()
    for k, v in sorted((text or {}).items()):
        info.add_text(k, str(v))
    Image.fromarray(array, "RGB").save(path, format="PNG", pnginfo=info)
