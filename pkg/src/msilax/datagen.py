"""Synthetic digit-on-clutter images, MNIST IDX ingestion and the dataset file format.

Synthetic samples are a pure function of ``(spec.seed, index)``: uniform
noise background, a few rectangle/line distractors, and one stroke-drawn
digit glyph composited brighter than anything in the background.  The
digit's tight bounding box is recorded for diagnostics.

Dataset file layout (little-endian)::

    b"MSIDATA1"
    u32 N, u32 C, u32 H, u32 W, u32 classes
    f32[N*C*H*W] pixels
    u8[N]        labels
    u16[N*4]     boxes (x, y, w, h)
"""
import gzip
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from msilax.errors import ConfigError, DataError, FormatError, SpecError
from msilax.numerics.rng import make_rng

MAGIC = b"MSIDATA1"
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# distractor intensities stay below this so the digit can always be >= bg max + 0.2
DISTRACTOR_INTENSITY = (0.25, 0.6)
DIGIT_MARGIN = 0.2


@dataclass
class DatasetSpec:
    seed: int = 0
    count: int = 1000
    image_size: int = 32
    num_classes: int = 10
    noise_amplitude: float = 0.3
    distractor_count_range: tuple = (1, 3)
    digit_scale_range: tuple = (9.0, 14.0)

    def validate(self):
        if self.count <= 0:
            raise ConfigError(f"count must be positive, got {self.count}")
        if self.image_size <= 0:
            raise ConfigError(f"image_size must be positive, got {self.image_size}")
        if not 1 <= self.num_classes <= 10:
            raise ConfigError(f"num_classes must be in [1, 10], got {self.num_classes}")
        if not 0.0 <= self.noise_amplitude <= 1.0:
            raise ConfigError(f"noise_amplitude must be in [0, 1], got {self.noise_amplitude}")
        lo, hi = self.distractor_count_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad distractor_count_range {self.distractor_count_range}")
        lo, hi = self.digit_scale_range
        if lo <= 0 or hi < lo:
            raise ConfigError(f"bad digit_scale_range {self.digit_scale_range}")
        # tallest glyph plus stroke must fit with a one-pixel border
        if _glyph_extent(hi)[1] > self.image_size - 2:
            raise SpecError(
                f"digit of height {hi:g}px cannot fit in a {self.image_size}px image"
            )


@dataclass
class LabeledImageBatch:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    boxes: np.ndarray  # (N, 4) uint16 x, y, w, h
    num_classes: int = 10
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx)
        return LabeledImageBatch(self.images[idx], self.labels[idx], self.boxes[idx],
                                 self.num_classes, dict(self.meta))

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


# ------------------------------------------------------------------ glyphs

def _arc(cx, cy, rx, ry, a0, a1, n=10):
    t = np.radians(np.linspace(a0, a1, n))
    return list(zip(cx + rx * np.cos(t), cy + ry * np.sin(t)))


# Polylines in a unit box, x to the right and y downwards; angles in degrees
# measured clockwise from +x (because y points down).
GLYPHS = {
    0: [_arc(0.5, 0.5, 0.45, 0.48, 0, 360, 20)],
    1: [[(0.25, 0.22), (0.55, 0.02), (0.55, 0.98)], [(0.25, 0.98), (0.85, 0.98)]],
    2: [_arc(0.5, 0.28, 0.4, 0.26, 180, 360, 9) + [(0.88, 0.38), (0.1, 0.98), (0.92, 0.98)]],
    3: [_arc(0.45, 0.26, 0.4, 0.24, 200, 450, 10), _arc(0.45, 0.73, 0.45, 0.25, 270, 520, 10)],
    4: [[(0.72, 0.98), (0.72, 0.02), (0.05, 0.68), (0.95, 0.68)]],
    5: [[(0.88, 0.02), (0.2, 0.02), (0.14, 0.46)] + _arc(0.48, 0.68, 0.42, 0.3, 225, 500, 11)],
    6: [[(0.82, 0.05), (0.45, 0.15), (0.14, 0.55)] + _arc(0.5, 0.7, 0.37, 0.28, 180, 540, 16)],
    7: [[(0.08, 0.02), (0.92, 0.02), (0.38, 0.98)]],
    8: [_arc(0.5, 0.26, 0.33, 0.24, 0, 360, 14), _arc(0.5, 0.74, 0.4, 0.25, 0, 360, 14)],
    9: [_arc(0.5, 0.3, 0.37, 0.28, 0, 360, 16), [(0.87, 0.3), (0.72, 0.98)]],
}


def _glyph_extent(height):
    """(width, height) in pixels of a glyph's box including stroke."""
    stroke = 1.15 * _stroke_width(height)
    return 0.9 * height + stroke, height + stroke


def _stroke_width(height):
    return max(1.5, 0.14 * height)


def _segments(digit, height, aspect, slant):
    segs = []
    for line in GLYPHS[digit]:
        pts = np.asarray(line, dtype=np.float64)
        x = pts[:, 0] * aspect * height + slant * (1.0 - pts[:, 1]) * height
        y = pts[:, 1] * height
        p = np.stack([x, y], axis=1)
        segs.append(np.concatenate([p[:-1], p[1:]], axis=1))
    return np.concatenate(segs, axis=0)


def render_glyph(digit, size, height, x0, y0, aspect=0.6, slant=0.0, stroke=None):
    """Anti-aliased coverage map (size x size) of ``digit`` with top-left at (x0, y0)."""
    stroke = _stroke_width(height) if stroke is None else stroke
    segs = _segments(digit, height, aspect, slant)
    segs[:, [0, 2]] += x0
    segs[:, [1, 3]] += y0
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    px = np.stack([xx.ravel(), yy.ravel()], axis=1)
    a = segs[None, :, :2]
    d = segs[None, :, 2:] - a
    ap = px[:, None, :] - a
    t = np.clip((ap * d).sum(-1) / np.maximum((d * d).sum(-1), 1e-12), 0.0, 1.0)
    dist = np.linalg.norm(ap - t[..., None] * d, axis=-1).min(axis=1)
    cover = np.clip(stroke / 2 + 0.5 - dist, 0.0, 1.0)
    return cover.reshape(size, size)


# ------------------------------------------------------------------ synthetic samples

def _distractors(rng, size, k):
    img = np.zeros((size, size))
    for _ in range(k):
        level = rng.uniform(*DISTRACTOR_INTENSITY)
        if rng.random() < 0.5:
            w, h = rng.integers(3, max(4, size // 3) + 1, size=2)
            x, y = rng.integers(0, size - w + 1), rng.integers(0, size - h + 1)
            if rng.random() < 0.5:
                img[y:y + h, x:x + w] = np.maximum(img[y:y + h, x:x + w], level)
            else:
                box = np.zeros((h, w), dtype=bool)
                box[[0, -1], :] = True
                box[:, [0, -1]] = True
                img[y:y + h, x:x + w][box] = np.maximum(img[y:y + h, x:x + w][box], level)
        else:
            p0 = rng.uniform(0, size, 2)
            p1 = rng.uniform(0, size, 2)
            n = int(np.ceil(np.abs(p1 - p0).max())) + 1
            pts = np.clip(np.round(np.linspace(p0, p1, n)).astype(int), 0, size - 1)
            img[pts[:, 1], pts[:, 0]] = np.maximum(img[pts[:, 1], pts[:, 0]], level)
    return img


def synthetic_sample(spec, index):
    """One (image HxW, label, box) triple; pure in ``(spec.seed, index)``."""
    rng = make_rng(spec.seed, "sample", index)
    size = spec.image_size
    label = int(rng.integers(0, spec.num_classes))

    bg = rng.random((size, size)) * spec.noise_amplitude
    k = int(rng.integers(spec.distractor_count_range[0], spec.distractor_count_range[1] + 1))
    if k:
        bg = np.maximum(bg, _distractors(rng, size, k))

    height = rng.uniform(*spec.digit_scale_range)
    aspect = rng.uniform(0.5, 0.75)
    slant = rng.uniform(-0.15, 0.15)
    stroke = _stroke_width(height) * rng.uniform(0.85, 1.15)
    # glyph footprint (x may extend left/right by the slant)
    gx_lo = min(0.0, slant * height) - stroke / 2
    gx_hi = max(aspect * height, aspect * height + slant * height) + stroke / 2
    gy_lo, gy_hi = -stroke / 2, height + stroke / 2
    x0 = rng.uniform(1 - gx_lo, size - 1 - gx_hi) if size - 2 > gx_hi - gx_lo else (size - (gx_hi + gx_lo)) / 2
    y0 = rng.uniform(1 - gy_lo, size - 1 - gy_hi) if size - 2 > gy_hi - gy_lo else (size - (gy_hi + gy_lo)) / 2
    cover = render_glyph(label, size, height, x0, y0, aspect, slant, stroke)

    bg_max = float(bg.max()) if bg.size else 0.0
    intensity = rng.uniform(min(bg_max + DIGIT_MARGIN, 1.0), 1.0)
    img = bg * (1.0 - cover) + intensity * cover

    ys, xs = np.nonzero(cover > 0)
    box = (xs.min(), ys.min(), xs.max() - xs.min() + 1, ys.max() - ys.min() + 1)
    return img.astype(np.float32), label, box


def generate_synthetic(spec, offset=0):
    """Samples ``offset .. offset+count-1`` of the stream defined by ``spec``."""
    spec.validate()
    n, size = spec.count, spec.image_size
    images = np.empty((n, 1, size, size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    boxes = np.empty((n, 4), dtype=np.uint16)
    for i in range(n):
        img, lab, box = synthetic_sample(spec, offset + i)
        images[i, 0] = img
        labels[i] = lab
        boxes[i] = box
    meta = {"generator": "synthetic", "offset": offset, **asdict(spec)}
    return LabeledImageBatch(images, labels, boxes, spec.num_classes, meta)


def split(batch, train_fraction, seed):
    """Deterministic shuffled (train, test) partition."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(batch)
    perm = make_rng(seed, "split").permutation(n)
    n_train = int(round(n * train_fraction))
    return batch.subset(np.sort(perm[:n_train])), batch.subset(np.sort(perm[n_train:]))


# ------------------------------------------------------------------ dataset file

def save_dataset(batch, path):
    n, c, h, w = batch.images.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<5I", n, c, h, w, batch.num_classes))
        f.write(batch.images.astype("<f4", copy=False).tobytes())
        f.write(batch.labels.astype(np.uint8).tobytes())
        f.write(batch.boxes.astype("<u2").tobytes())


def load_dataset(path):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a dataset file (bad magic)", 0)
    if len(raw) < 28:
        raise FormatError(f"{path}: truncated header", len(raw))
    n, c, h, w, classes = struct.unpack_from("<5I", raw, 8)
    off = 28
    sizes = [n * c * h * w * 4, n, n * 8]
    if len(raw) != off + sum(sizes):
        raise FormatError(f"{path}: expected {off + sum(sizes)} bytes, found {len(raw)}", min(len(raw), off + sum(sizes)))
    images = np.frombuffer(raw, "<f4", n * c * h * w, off).reshape(n, c, h, w).astype(np.float32)
    off += sizes[0]
    labels = np.frombuffer(raw, np.uint8, n, off).astype(np.int64)
    off += sizes[1]
    boxes = np.frombuffer(raw, "<u2", n * 4, off).reshape(n, 4).astype(np.uint16)
    if n and labels.max() >= classes:
        raise DataError(f"{path}: label {labels.max()} >= classes {classes}")
    return LabeledImageBatch(images, labels, boxes, int(classes), {"source": str(path)})


# ------------------------------------------------------------------ MNIST IDX

def _read(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _tight_boxes(images):
    boxes = np.zeros((len(images), 4), dtype=np.uint16)
    for i, img in enumerate(images):
        ys, xs = np.nonzero(img[0] > 0)
        if len(xs):
            boxes[i] = (xs.min(), ys.min(), xs.max() - xs.min() + 1, ys.max() - ys.min() + 1)
    return boxes


def load_idx(images_path, labels_path, image_size=None, num_classes=10):
    """Read an MNIST-style IDX pair (optionally gzipped) into a batch in [0, 1].

    ``image_size`` zero-pads each image symmetrically up to that size.
    """
    img_raw = _read(images_path)
    lab_raw = _read(labels_path)
    if len(img_raw) < 16:
        raise FormatError(f"{images_path}: truncated header", len(img_raw))
    magic, n, rows, cols = struct.unpack_from(">4I", img_raw, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: bad image magic 0x{magic:08x}", 0)
    if len(lab_raw) < 8:
        raise FormatError(f"{labels_path}: truncated header", len(lab_raw))
    lmagic, ln = struct.unpack_from(">2I", lab_raw, 0)
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"{labels_path}: bad label magic 0x{lmagic:08x}", 0)
    if ln != n:
        raise FormatError(f"{labels_path}: {ln} labels but {n} images", 4)
    need = 16 + n * rows * cols
    if len(img_raw) < need:
        raise FormatError(f"{images_path}: truncated pixel data", len(img_raw))
    if len(lab_raw) < 8 + n:
        raise FormatError(f"{labels_path}: truncated label data", len(lab_raw))

    pix = np.frombuffer(img_raw, np.uint8, n * rows * cols, 16).reshape(n, 1, rows, cols)
    images = pix.astype(np.float32) / np.float32(255.0)
    labels = np.frombuffer(lab_raw, np.uint8, n, 8).astype(np.int64)
    if n and labels.max() >= num_classes:
        raise DataError(f"{labels_path}: label {labels.max()} >= {num_classes}")
    if image_size is not None and image_size != rows:
        if image_size < rows or image_size < cols:
            raise ConfigError(f"image_size {image_size} smaller than IDX images {rows}x{cols}")
        py, px = image_size - rows, image_size - cols
        images = np.pad(images, ((0, 0), (0, 0), (py // 2, py - py // 2), (px // 2, px - px // 2)))
    return LabeledImageBatch(images, labels, _tight_boxes(images), num_classes,
                             {"source": str(images_path)})


def write_idx(images_u8, labels_u8, images_path, labels_path):
    """Write raw IDX files (test fixtures and round-trips)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    n, rows, cols = images_u8.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(images_u8.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, n))
        f.write(np.asarray(labels_u8, dtype=np.uint8).tobytes())
