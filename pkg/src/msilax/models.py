"""Base classifier: conv feature extractor plus a linear head.

Weights file layout::

    b"MSIWGHT1"
    u32 (little-endian) manifest length in bytes
    manifest: UTF-8 JSON, keys sorted, with
        kind, architecture, frozen, config, meta,
        tensors: [{name, shape, byte_offset}, ...], blob_bytes
    blob: little-endian f32 values of every tensor, concatenated
"""
import json
import logging
import struct
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from msilax import numerics as nx
from msilax.errors import ConfigError, DimensionError, FormatError, TrainingError
from msilax.numerics import Tensor, no_grad
from msilax.numerics.rng import make_rng

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"MSIWGHT1"


@dataclass
class Architecture:
    in_channels: int = 1
    image_size: int = 32
    channels: tuple = (16, 32, 64)
    kernel: int = 3
    num_classes: int = 10

    @property
    def feature_size(self):
        return self.image_size // 2 ** len(self.channels)

    def validate(self):
        if self.image_size % 2 ** len(self.channels):
            raise ConfigError(f"image_size {self.image_size} not divisible by 2^{len(self.channels)}")
        if self.feature_size < 4:
            raise ConfigError(f"feature map {self.feature_size}x{self.feature_size} smaller than 4x4")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    weight_decay: float = 0.0

    def validate(self):
        if self.lr <= 0 or self.batch_size <= 0:
            raise ConfigError("lr and batch_size must be positive")
        if self.epochs < 0 or self.weight_decay < 0:
            raise ConfigError("epochs and weight_decay must be non-negative")


def uniform_fan_in(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


class Classifier:
    """``head(features(x))`` with named parameters.

    ``features`` is a stack of conv3x3(pad 1) -> relu -> maxpool2 blocks;
    ``head`` flattens and applies one linear layer.
    """

    def __init__(self, arch=None, seed=0):
        self.arch = arch or Architecture()
        self.arch.validate()
        rng = make_rng(seed, "classifier-init")
        a = self.arch
        self.params = {}
        c_in = a.in_channels
        for i, c_out in enumerate(a.channels):
            fan_in = c_in * a.kernel * a.kernel
            self.params[f"conv{i}.weight"] = Tensor(uniform_fan_in(rng, (c_out, c_in, a.kernel, a.kernel), fan_in))
            self.params[f"conv{i}.bias"] = Tensor(np.zeros(c_out, np.float32))
            c_in = c_out
        n_feat = c_in * a.feature_size ** 2
        self.params["head.weight"] = Tensor(uniform_fan_in(rng, (n_feat, a.num_classes), n_feat))
        self.params["head.bias"] = Tensor(np.zeros(a.num_classes, np.float32))
        self.frozen = False
        self.meta = {}
        self.unfreeze()

    # -- freezing
    def freeze(self):
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self):
        self.frozen = False
        for p in self.params.values():
            p.requires_grad = True
        return self

    # -- forward
    def _check_input(self, x):
        a = self.arch
        want = (a.in_channels, a.image_size, a.image_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != want:
            raise DimensionError(f"expected images of shape (N, {want[0]}, {want[1]}, {want[2]}), got {tuple(x.shape)}")

    def features(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        self._check_input(x)
        pad = self.arch.kernel // 2
        for i in range(len(self.arch.channels)):
            x = nx.conv2d(x, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"], padding=pad)
            x = nx.max_pool2d(nx.relu(x))
        return x

    def head(self, feats):
        return nx.add(nx.matmul(nx.flatten(feats), self.params["head.weight"]), self.params["head.bias"])

    def forward(self, x):
        return self.head(self.features(x))

    __call__ = forward

    def predict(self, images, batch_size=512):
        """(logits, probs, argmax labels) as numpy arrays, order preserving."""
        images = np.asarray(images, dtype=np.float32)
        logits = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                logits.append(self.forward(Tensor(images[i:i + batch_size])).data)
        logits = np.concatenate(logits) if logits else np.zeros((0, self.arch.num_classes), np.float32)
        probs = nx.softmax(Tensor(logits), axis=1).data
        return logits, probs, probs.argmax(axis=1)

    def predict_proba(self, images, batch_size=512):
        return self.predict(images, batch_size)[1]

    def accuracy(self, images, labels):
        return float(np.mean(self.predict(images)[2] == np.asarray(labels)))

    def state_hash(self):
        import hashlib
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()


def forward_features(model, images):
    return model.features(images)


def predict(model, images):
    return model.predict(images)


# ------------------------------------------------------------------ training

def iterate_minibatches(n, batch_size, rng):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def train_classifier(train, config=None, test=None, arch=None, log=None):
    """Fit a fresh :class:`Classifier` on ``train`` with Adam + cross-entropy.

    Returns the (unfrozen) model; ``model.meta`` records the config, the
    per-epoch history and the final train/test accuracy.
    """
    config = config or TrainConfig()
    config.validate()
    if len(train) == 0:
        raise ConfigError("training set is empty")
    n, c, h, w = train.images.shape
    arch = arch or Architecture(in_channels=c, image_size=h, num_classes=train.num_classes)
    model = Classifier(arch, seed=config.seed)
    opt = nx.Adam(model.params, lr=config.lr, weight_decay=config.weight_decay)
    rng = make_rng(config.seed, "classifier-batches")
    history = []
    step = 0
    for epoch in range(config.epochs):
        total, seen = 0.0, 0
        for idx in iterate_minibatches(n, config.batch_size, rng):
            loss = nx.cross_entropy(model.forward(Tensor(train.images[idx])), train.labels[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"classifier loss is {value} at epoch {epoch}, step {step}")
            loss.backward()
            opt.step()
            total += value * len(idx)
            seen += len(idx)
            step += 1
        row = {"epoch": epoch, "loss": total / seen}
        history.append(row)
        if log:
            log(f"epoch {epoch + 1}/{config.epochs} loss {row['loss']:.4f}")
    model.meta = {
        "train_config": asdict(config),
        "history": history,
        "train_accuracy": model.accuracy(train.images, train.labels),
    }
    if test is not None and len(test):
        model.meta["test_accuracy"] = model.accuracy(test.images, test.labels)
    return model


# ------------------------------------------------------------------ weights IO

def write_weights(path, kind, params, architecture, frozen=False, config=None, meta=None):
    tensors, blobs, offset = [], [], 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "byte_offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "kind": kind,
        "architecture": architecture,
        "frozen": bool(frozen),
        "config": config or {},
        "meta": meta or {},
        "tensors": tensors,
        "blob_bytes": offset,
    }
    head = json.dumps(manifest, sort_keys=True, default=_json_default).encode("utf-8")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def read_weights(path):
    """(manifest dict, {name: float32 array}) from a weights file."""
    raw = Path(path).read_bytes()
    if raw[:8] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: not a weights file (bad magic)", 0)
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header", len(raw))
    (mlen,) = struct.unpack_from("<I", raw, 8)
    if len(raw) < 12 + mlen:
        raise FormatError(f"{path}: truncated manifest", len(raw))
    try:
        manifest = json.loads(raw[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable manifest ({e})", 12) from None
    blob = raw[12 + mlen:]
    arrays = {}
    for t in manifest.get("tensors", []):
        count = int(np.prod(t["shape"], dtype=np.int64))
        start = t["byte_offset"]
        if start < 0 or start + 4 * count > len(blob):
            raise FormatError(f"{path}: tensor {t['name']!r} lies outside the blob", 12 + mlen + len(blob))
        arrays[t["name"]] = np.frombuffer(blob, "<f4", count, start).reshape(t["shape"]).astype(np.float32)
    if len(blob) != manifest.get("blob_bytes", len(blob)):
        raise FormatError(f"{path}: blob is {len(blob)} bytes, manifest says {manifest['blob_bytes']}", 12 + mlen + len(blob))
    return manifest, arrays


def _assign(params, arrays, path):
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise FormatError(f"{path}: tensor names differ from architecture (missing {sorted(missing)}, extra {sorted(extra)})")
    for name, p in params.items():
        if arrays[name].shape != p.data.shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {arrays[name].shape}, expected {p.data.shape}")
        p.data = arrays[name].copy()


def save_weights(model, path):
    write_weights(path, "classifier", model.params, asdict(model.arch), frozen=model.frozen,
                  config=model.meta.get("train_config", {}),
                  meta={k: v for k, v in model.meta.items() if k != "train_config"})


def load_weights(path):
    manifest, arrays = read_weights(path)
    if manifest.get("kind") != "classifier":
        raise FormatError(f"{path}: expected a classifier file, found {manifest.get('kind')!r}")
    arch_d = dict(manifest["architecture"])
    arch_d["channels"] = tuple(arch_d["channels"])
    model = Classifier(Architecture(**arch_d))
    _assign(model.params, arrays, path)
    model.meta = dict(manifest.get("meta", {}))
    if manifest.get("config"):
        model.meta["train_config"] = manifest["config"]
    if manifest.get("frozen"):
        model.freeze()
    return model


def probability_fn(model):
    """Normalise a model to ``images -> (N, classes) probabilities``.

    Accepts anything with ``predict_proba`` or a plain callable.
    """
    if hasattr(model, "predict_proba"):
        return model.predict_proba
    if callable(model):
        return model
    raise TypeError(f"{type(model).__name__} is neither callable nor has predict_proba")
