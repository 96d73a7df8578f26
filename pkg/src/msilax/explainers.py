"""Heatmap producers.

LAX: a small conv adapter on top of a frozen classifier's feature map. It
emits a low-resolution sigmoid mask that is bilinearly upsampled and
multiplied into the input; training keeps the masked input classifiable
while a temperature-softmax entropy term concentrates the mask.

Baselines (forward only): occlusion sensitivity, RISE and uniform noise.

Heatmap file layout (little-endian)::

    b"MSIHEAT1" | u32 N | u32 H | u32 W | u32 tag length | UTF-8 method tag
    | N*H*W f32 values
"""
import logging
import math
import struct
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from msilax import numerics as nx
from msilax.errors import ConfigError, DataError, DimensionError, FormatError, TrainingError, UsageError
from msilax.models import probability_fn, read_weights, uniform_fan_in, write_weights, iterate_minibatches, _assign
from msilax.numerics import Tensor, no_grad
from msilax.numerics.ops import bilinear_matrix
from msilax.numerics.rng import make_rng

logger = logging.getLogger(__name__)

HEATMAP_MAGIC = b"MSIHEAT1"
METHODS = ("lax", "occlusion", "rise", "random")


@dataclass
class HeatmapSet:
    """``values`` is (N, H, W) float32 in [0, 1], one map per sample."""
    values: np.ndarray
    method: str
    source_resolution: tuple = None
    sample_ids: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim == 2:
            self.values = self.values[None]
        if self.values.ndim != 3:
            raise DimensionError(f"heatmaps must be (N, H, W), got {self.values.shape}")
        if self.source_resolution is None:
            self.source_resolution = tuple(self.values.shape[1:])
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.values))

    def __len__(self):
        return len(self.values)

    def check_range(self):
        v = self.values
        if v.size and (not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1):
            raise DataError(f"{self.method} heatmap values outside [0, 1]")
        return self


def save_heatmaps(hm, path):
    hm.check_range()
    tag = hm.method.encode("utf-8")
    n, h, w = hm.values.shape
    with open(path, "wb") as f:
        f.write(HEATMAP_MAGIC)
        f.write(struct.pack("<4I", n, h, w, len(tag)))
        f.write(tag)
        f.write(np.ascontiguousarray(hm.values, "<f4").tobytes())


def load_heatmaps(path):
    raw = Path(path).read_bytes()
    if raw[:8] != HEATMAP_MAGIC:
        raise FormatError(f"{path}: not a heatmap file (bad magic)", 0)
    if len(raw) < 24:
        raise FormatError(f"{path}: truncated header", len(raw))
    n, h, w, tlen = struct.unpack_from("<4I", raw, 8)
    start = 24 + tlen
    if len(raw) < start:
        raise FormatError(f"{path}: truncated method tag", len(raw))
    method = raw[24:start].decode("utf-8", errors="replace")
    need = 4 * n * h * w
    if len(raw) != start + need:
        raise FormatError(f"{path}: expected {need} value bytes, found {len(raw) - start}", len(raw))
    values = np.frombuffer(raw, "<f4", n * h * w, start).reshape(n, h, w).astype(np.float32)
    return HeatmapSet(values, method)


def minmax_normalize(x):
    """Scale to [0, 1]; a constant map becomes all zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo <= 0 or not np.isfinite(hi - lo):
        return np.zeros(x.shape, np.float32)
    return ((x - lo) / (hi - lo)).astype(np.float32)


# ------------------------------------------------------------------ LAX

@dataclass
class LaxConfig:
    lambda_entropy: float = 5.0
    temperature: float = 0.5
    epsilon: float = 1e-8
    lr: float = 1e-3
    epochs: int = 60
    batch_size: int = 64
    seed: int = 0

    def validate(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.lambda_entropy < 0:
            raise ConfigError("lambda_entropy must be >= 0")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ConfigError("lr and batch_size must be positive, epochs non-negative")


class LaxAdapter:
    """Conv stack C -> C/2 -> C/4 -> C/8 -> 1 (3x3, pad 1, relu between)."""

    def __init__(self, in_channels=64, seed=0):
        if in_channels < 8 or in_channels % 8:
            raise ConfigError(f"adapter needs in_channels divisible by 8, got {in_channels}")
        self.in_channels = in_channels
        widths = [in_channels, in_channels // 2, in_channels // 4, in_channels // 8, 1]
        rng = make_rng(seed, "lax-adapter-init")
        self.params = {}
        for i, (ci, co) in enumerate(zip(widths[:-1], widths[1:])):
            self.params[f"conv{i}.weight"] = Tensor(uniform_fan_in(rng, (co, ci, 3, 3), ci * 9), requires_grad=True)
            self.params[f"conv{i}.bias"] = Tensor(np.zeros(co, np.float32), requires_grad=True)
        self.n_layers = len(widths) - 1
        self.meta = {}

    def logits(self, feats):
        x = feats
        for i in range(self.n_layers):
            x = nx.conv2d(x, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"], padding=1)
            if i < self.n_layers - 1:
                x = nx.relu(x)
        return x

    def low_res_mask(self, feats):
        """Sigmoid mask at feature resolution, shape (N, 1, h, w)."""
        return nx.sigmoid(self.logits(feats))

    def state_hash(self):
        import hashlib
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()


@dataclass
class LaxOutput:
    orig_logits: Tensor
    mask_low: Tensor
    mask: Tensor
    masked_images: Tensor
    masked_logits: Tensor


def lax_forward(classifier, adapter, images):
    """Run the frozen classifier with the adapter's mask applied to its input."""
    if not getattr(classifier, "frozen", False):
        raise UsageError("LAX requires a frozen classifier; call freeze() or load a frozen weights file")
    x = images if isinstance(images, Tensor) else Tensor(images)
    feats = classifier.features(x)
    orig = classifier.head(feats)
    m_low = adapter.low_res_mask(feats)
    m = nx.upsample_bilinear(m_low, x.shape[-2:])
    t = nx.mul(x, m)
    return LaxOutput(orig, m_low, m, t, classifier.forward(t))


def entropy_loss(mask, t=0.5, eps=1e-8):
    """Batch mean of the entropy of ``softmax(max(0, M) / t)`` over each map."""
    if t <= 0:
        raise ConfigError("temperature must be > 0")
    m = mask if isinstance(mask, Tensor) else Tensor(mask)
    n = m.shape[0]
    z = nx.div(nx.max_scalar(nx.reshape(m, (n, -1)), 0.0), nx.as_tensor(t, like=m))
    p = nx.softmax(z, axis=1)
    logp = nx.log(nx.add(p, nx.as_tensor(eps, like=m))) if eps else nx.log(p)
    return nx.neg(nx.mean(nx.sum(nx.mul(p, logp), axis=1)))


def lax_loss(labels, masked_logits, mask_low, cfg=None):
    cfg = cfg or LaxConfig()
    ce = nx.cross_entropy(masked_logits, labels)
    if cfg.lambda_entropy == 0:
        return ce
    ent = entropy_loss(mask_low, cfg.temperature, cfg.epsilon)
    return nx.add(ce, nx.mul(ent, nx.as_tensor(cfg.lambda_entropy, like=ent)))


def _feature_channels(classifier):
    return classifier.arch.channels[-1]


def train_lax(classifier, data, cfg=None, log=None, on_epoch=None):
    """Fit a :class:`LaxAdapter` on ``data`` against the frozen ``classifier``.

    ``on_epoch(epoch, adapter, row)`` is called after every epoch, e.g. for
    held-out monitoring.
    """
    cfg = cfg or LaxConfig()
    cfg.validate()
    if not getattr(classifier, "frozen", False):
        raise UsageError("train_lax needs a frozen classifier")
    adapter = LaxAdapter(_feature_channels(classifier), seed=cfg.seed)
    opt = nx.Adam(adapter.params, lr=cfg.lr)
    rng = make_rng(cfg.seed, "lax-batches")
    n = len(data)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        tot_loss = tot_correct = tot_mask = 0.0
        for idx in iterate_minibatches(n, cfg.batch_size, rng):
            out = lax_forward(classifier, adapter, data.images[idx])
            labels = data.labels[idx]
            loss = lax_loss(labels, out.masked_logits, out.mask_low, cfg)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"LAX loss is {value} at epoch {epoch}, step {step}")
            loss.backward()
            opt.step()
            k = len(idx)
            tot_loss += value * k
            tot_correct += float(np.sum(out.masked_logits.data.argmax(1) == labels))
            tot_mask += float(out.mask.data.mean()) * k
            step += 1
        row = {"epoch": epoch, "loss": tot_loss / n, "masked_accuracy": tot_correct / n, "mean_mask": tot_mask / n}
        history.append(row)
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {row['loss']:.4f} "
                f"masked_acc {row['masked_accuracy']:.4f} mean_mask {row['mean_mask']:.4f}")
        if on_epoch:
            on_epoch(epoch, adapter, row)
    adapter.meta = {"lax_config": asdict(cfg), "history": history}
    return adapter


def lax_explain(classifier, adapter, images, batch_size=256):
    """Upsampled masks for ``images`` as a :class:`HeatmapSet`, plus summary stats."""
    images = np.asarray(images, np.float32)
    maps, low, correct_logits = [], None, []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out = lax_forward(classifier, adapter, images[i:i + batch_size])
            maps.append(out.mask.data[:, 0])
            low = out.mask_low.shape[-2:]
            correct_logits.append(out.masked_logits.data)
    values = np.concatenate(maps) if maps else np.zeros((0,) + images.shape[-2:], np.float32)
    hm = HeatmapSet(values, "lax", tuple(low) if low else None)
    hm.masked_logits = np.concatenate(correct_logits) if correct_logits else None
    return hm


def save_adapter(adapter, path):
    write_weights(path, "lax_adapter", adapter.params, {"in_channels": adapter.in_channels},
                  frozen=False, config=adapter.meta.get("lax_config", {}),
                  meta={k: v for k, v in adapter.meta.items() if k != "lax_config"})


def load_adapter(path):
    manifest, arrays = read_weights(path)
    if manifest.get("kind") != "lax_adapter":
        raise FormatError(f"{path}: expected a lax_adapter file, found {manifest.get('kind')!r}")
    adapter = LaxAdapter(manifest["architecture"]["in_channels"])
    _assign(adapter.params, arrays, path)
    adapter.meta = dict(manifest.get("meta", {}))
    if manifest.get("config"):
        adapter.meta["lax_config"] = manifest["config"]
    return adapter


# ------------------------------------------------------------------ baselines

def _true_class_scores(prob, images, label):
    return np.asarray(prob(np.asarray(images, np.float32)), np.float64)[:, int(label)]


def window_starts(size, patch, stride):
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def occlusion_explain(classifier, image, label, patch=8, stride=4, baseline=0.0):
    """Mean drop in true-class probability over the windows covering each pixel."""
    image = np.asarray(image, np.float32)
    if image.ndim == 2:
        image = image[None]
    _, h, w = image.shape
    if patch <= 0 or stride <= 0:
        raise ConfigError("patch and stride must be positive")
    if patch > min(h, w):
        raise ConfigError(f"patch {patch} larger than image side {min(h, w)}")
    if stride > patch:
        raise ConfigError(f"stride {stride} > patch {patch} leaves pixels uncovered")
    prob = probability_fn(classifier)
    windows = [(y, x) for y in window_starts(h, patch, stride) for x in window_starts(w, patch, stride)]
    batch = np.repeat(image[None], len(windows) + 1, axis=0)
    for k, (y, x) in enumerate(windows, start=1):
        batch[k, :, y:y + patch, x:x + patch] = baseline
    scores = _true_class_scores(prob, batch, label)
    drops = scores[0] - scores[1:]
    total = np.zeros((h, w))
    cover = np.zeros((h, w))
    for d, (y, x) in zip(drops, windows):
        total[y:y + patch, x:x + patch] += d
        cover[y:y + patch, x:x + patch] += 1
    return minmax_normalize(total / cover)


def rise_masks(shape, n_masks, grid, keep_prob, seed):
    """(n_masks, H, W) smooth masks: upsampled binary grids with a random shift."""
    if n_masks <= 0:
        raise ConfigError("n_masks must be positive")
    if grid < 2:
        raise ConfigError("grid must be >= 2")
    if not 0 < keep_prob < 1:
        raise ConfigError("keep_prob must lie in (0, 1)")
    h, w = shape
    ch, cw = math.ceil(h / grid), math.ceil(w / grid)
    rng = make_rng(seed, "rise")
    cells = (rng.random((n_masks, grid + 1, grid + 1)) < keep_prob).astype(np.float64)
    ay = bilinear_matrix(grid + 1, (grid + 1) * ch, np.float64)
    ax = bilinear_matrix(grid + 1, (grid + 1) * cw, np.float64)
    up = ay @ cells @ ax.T
    dy = rng.integers(0, ch, n_masks)
    dx = rng.integers(0, cw, n_masks)
    out = np.empty((n_masks, h, w), np.float32)
    for i in range(n_masks):
        out[i] = up[i, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out


def rise_explain(classifier, image, label, n_masks=500, grid=4, keep_prob=0.5, seed=0, masks=None, batch_size=500):
    image = np.asarray(image, np.float32)
    if image.ndim == 2:
        image = image[None]
    if masks is None:
        masks = rise_masks(image.shape[-2:], n_masks, grid, keep_prob, seed)
    prob = probability_fn(classifier)
    scores = np.concatenate([
        _true_class_scores(prob, image[None] * masks[i:i + batch_size, None], label)
        for i in range(0, len(masks), batch_size)
    ])
    sal = np.tensordot(scores, masks.astype(np.float64), axes=1) / (len(masks) * keep_prob)
    return minmax_normalize(sal)


def random_explain(shape, seed=0):
    return make_rng(seed, "random-heatmap").random(shape).astype(np.float32)


def explain_batch(method, classifier, batch, adapter=None, seed=0, occlusion=None, rise=None):
    """Heatmaps for every sample of ``batch`` with the named method."""
    occlusion = occlusion or {}
    rise = rise or {}
    n, _, h, w = batch.images.shape
    if method == "lax":
        if adapter is None:
            raise UsageError("the lax method needs an adapter")
        return lax_explain(classifier, adapter, batch.images)
    if method == "occlusion":
        vals = [occlusion_explain(classifier, img, lab, **occlusion) for img, lab in zip(batch.images, batch.labels)]
    elif method == "rise":
        # one shared mask set per run keeps samples comparable and saves work
        masks = rise_masks((h, w), rise.get("n_masks", 500), rise.get("grid", 4), rise.get("keep_prob", 0.5), seed)
        vals = [rise_explain(classifier, img, lab, keep_prob=rise.get("keep_prob", 0.5), masks=masks)
                for img, lab in zip(batch.images, batch.labels)]
    elif method == "random":
        return HeatmapSet(random_explain((n, h, w), seed), "random")
    else:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    return HeatmapSet(np.stack(vals) if vals else np.zeros((0, h, w), np.float32), method)
