"""Perturbation scoring of heatmaps: MSI, MoRF insertion/deletion and Fid-/Fid+.

Every metric is a function of model scores on masked copies of an image.
A pixel is kept when the heatmap satisfies a predicate and replaced with
``baseline_fill`` otherwise:

* ``above(a)``: value > a
* ``at_or_below(a)``: value <= a
* ``band(lo, hi)``: lo < value <= hi

MSI for one sample, with threshold ``a0`` and alpha grid ``a0, a0+step, ..., 1``::

    show_gt  = score(above(a0))
    show_lt  = score(at_or_below(a0))
    auc_show = trapz_k score(above(a_k))       / (1 - a0)
    auc_hide = trapz_k score(band(a0, a_k))    / (1 - a0)
    base     = ((show_gt - show_lt) + (auc_show - auc_hide)) / 2
    penalty  = fraction of pixels with value >= a0
    msi      = base - penalty

Thresholds are compared in the heatmap's dtype, so a float32 map holding
0.6 is not "above" an alpha of 0.6.
"""
import csv
import json
import math
from dataclasses import dataclass, asdict, field

import numpy as np

from msilax.errors import ConfigError, DataError, DimensionError
from msilax.models import probability_fn

SCORE_MODES = ("accuracy", "true_class_probability")

CSV_COLUMNS = [
    "sample_id", "method", "alpha_min", "show_gt", "show_lt", "auc_show", "auc_hide", "base_score",
    "mask_penalty", "msi", "morf_ins_px", "morf_del_px", "morf_ins_pct", "morf_del_pct",
    "fid_minus_px", "fid_plus_px", "fid_minus_pct", "fid_plus_pct",
]

# report field -> CSV column
_FIELD_COLUMNS = {
    "show_gt": "show_gt", "show_lt": "show_lt", "auc_show": "auc_show", "auc_hide": "auc_hide",
    "base_score": "base_score", "mask_penalty": "mask_penalty", "msi": "msi",
    "morf_insertion_px": "morf_ins_px", "morf_deletion_px": "morf_del_px",
    "morf_insertion_pct": "morf_ins_pct", "morf_deletion_pct": "morf_del_pct",
    "fid_minus_px": "fid_minus_px", "fid_plus_px": "fid_plus_px",
    "fid_minus_pct": "fid_minus_pct", "fid_plus_pct": "fid_plus_pct",
}


@dataclass
class MetricConfig:
    alpha_min: float = 0.5
    alpha_step: float = 0.02
    score_mode: str = "accuracy"
    baseline_fill: float = 0.0
    percent_step: float = 0.02

    def validate(self):
        if not 0 < self.alpha_min < 1:
            raise ConfigError(f"alpha_min must lie in (0, 1), got {self.alpha_min}")
        if not 0 < self.alpha_step <= 1 - self.alpha_min + 1e-12:
            raise ConfigError(f"alpha_step must lie in (0, 1 - alpha_min], got {self.alpha_step}")
        if self.score_mode not in SCORE_MODES:
            raise ConfigError(f"score_mode must be one of {SCORE_MODES}, got {self.score_mode!r}")
        if not 0 < self.percent_step <= 1:
            raise ConfigError("percent_step must lie in (0, 1]")
        s = round(1 / self.percent_step)
        if abs(s * self.percent_step - 1) > 1e-9:
            raise ConfigError(f"percent_step {self.percent_step} does not divide 1")
        return self


# ------------------------------------------------------------------ predicates

@dataclass(frozen=True)
class above:
    alpha: float

    def __call__(self, heat):
        return heat > np.asarray(self.alpha, heat.dtype)


@dataclass(frozen=True)
class at_or_below:
    alpha: float

    def __call__(self, heat):
        return heat <= np.asarray(self.alpha, heat.dtype)


@dataclass(frozen=True)
class band:
    lo: float
    hi: float

    def __call__(self, heat):
        return (heat > np.asarray(self.lo, heat.dtype)) & (heat <= np.asarray(self.hi, heat.dtype))


def apply_mask(image, heatmap, predicate, baseline_fill=0.0):
    """Keep pixels whose heat satisfies ``predicate``; fill the rest.

    ``image`` is (..., H, W); ``heatmap`` is (H, W) or broadcastable.
    """
    image = np.asarray(image)
    heatmap = np.asarray(heatmap)
    if image.shape[-2:] != heatmap.shape[-2:]:
        raise DimensionError(f"heatmap {heatmap.shape} does not match image {image.shape}")
    keep = predicate(heatmap)
    return np.where(keep, image, np.asarray(baseline_fill, image.dtype))


# ------------------------------------------------------------------ grids

def alpha_grid(alpha_min, step):
    """alpha_min, alpha_min + step, ... up to and including 1.0."""
    if step <= 0:
        raise ConfigError("alpha step must be positive")
    n = math.floor((1.0 - alpha_min) / step + 1e-9)
    grid = [round(alpha_min + i * step, 12) for i in range(n + 1)]
    if grid[-1] < 1.0:
        grid.append(1.0)
    if len(grid) < 2:
        raise ConfigError(f"alpha grid from {alpha_min} with step {step} is empty")
    return np.array(grid)


def morf_alpha_grid(step):
    """1.0, 1.0 - step, ... down to and including 0.0."""
    n = math.floor(1.0 / step + 1e-9)
    grid = [round(1.0 - i * step, 12) for i in range(n + 1)]
    if grid[-1] > 0.0:
        grid.append(0.0)
    return np.array(grid)


def percent_counts(n_pixels, percent_step):
    """Pixels revealed at each percent step, 0 ... n_pixels, rounded half up."""
    s = round(1 / percent_step)
    return [(2 * i * n_pixels + s) // (2 * s) for i in range(s + 1)]


def rank_pixels(heat):
    """Flat indices ordered most relevant first; ties go to the lower row-major index."""
    return np.argsort(-heat.ravel(), kind="stable")


def trapezoid_auc(scores, grid):
    scores = np.asarray(scores, np.float64)
    width = grid[-1] - grid[0]
    return float(np.sum((scores[1:] + scores[:-1]) * 0.5 * np.diff(grid)) / width)


# ------------------------------------------------------------------ scoring

def sample_scores(model, images, labels, score_mode="accuracy", batch_size=1024):
    """Per-image score: 1/0 correctness or probability of the true class."""
    if score_mode not in SCORE_MODES:
        raise ConfigError(f"score_mode must be one of {SCORE_MODES}")
    prob = probability_fn(model)
    images = np.asarray(images, np.float32)
    labels = np.asarray(labels)
    out = np.empty(len(images), np.float64)
    for i in range(0, len(images), batch_size):
        p = np.asarray(prob(images[i:i + batch_size]), np.float64)
        lab = labels[i:i + batch_size]
        if score_mode == "accuracy":
            out[i:i + batch_size] = p.argmax(axis=1) == lab
        else:
            out[i:i + batch_size] = p[np.arange(len(lab)), lab]
    return out


def score(model, images, labels, score_mode="accuracy"):
    if len(images) == 0:
        raise DataError("cannot score an empty batch")
    return float(sample_scores(model, images, labels, score_mode).mean())


def mask_penalty(heatmaps, alpha_min):
    h = np.asarray(heatmaps)
    if h.ndim == 2:
        h = h[None]
    frac = (h >= np.asarray(alpha_min, h.dtype)).reshape(len(h), -1).mean(axis=1)
    return float(frac.mean())


def msi(base, penalty):
    return base - penalty


# ------------------------------------------------------------------ engine

class _Layout:
    """Which rows of a per-sample mask stack feed which metric."""

    def __init__(self, cfg, n_pixels, with_morf=True):
        self.grid = alpha_grid(cfg.alpha_min, cfg.alpha_step)
        self.slices = {}
        k = 0

        def take(name, n):
            nonlocal k
            self.slices[name] = slice(k, k + n)
            k += n

        take("full", 1)
        take("show_gt", 1)
        take("show_lt", 1)
        take("show_curve", len(self.grid))
        take("hide_curve", len(self.grid))
        if with_morf:
            self.px_grid = morf_alpha_grid(cfg.alpha_step)
            self.pct_counts = percent_counts(n_pixels, cfg.percent_step)
            take("ins_px", len(self.px_grid))
            take("del_px", len(self.px_grid))
            take("ins_pct", len(self.pct_counts))
            take("del_pct", len(self.pct_counts))
        self.size = k
        self.with_morf = with_morf


def _mask_stack(heat, layout, cfg):
    a0 = cfg.alpha_min
    rows = [np.ones(heat.shape, bool), above(a0)(heat), at_or_below(a0)(heat)]
    rows += [above(a)(heat) for a in layout.grid]
    rows += [band(a0, a)(heat) for a in layout.grid]
    if layout.with_morf:
        rows += [above(a)(heat) for a in layout.px_grid]
        rows += [at_or_below(a)(heat) for a in layout.px_grid]
        order = rank_pixels(heat)
        top = np.zeros((len(layout.pct_counts), heat.size), bool)
        for i, n in enumerate(layout.pct_counts):
            top[i, order[:n]] = True
        top = top.reshape((-1,) + heat.shape)
        rows += list(top)
        rows += list(~top)
    return np.stack(rows)


@dataclass
class MetricReport:
    """Per-sample metric arrays plus the config that produced them."""
    config: dict
    sample_ids: np.ndarray
    values: dict = field(default_factory=dict)

    def __getattr__(self, name):
        values = self.__dict__.get("values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    def aggregate(self):
        return {k: float(np.mean(v)) if len(v) else float("nan") for k, v in self.values.items()}

    def __len__(self):
        return len(self.sample_ids)


def evaluate(model, images, labels, heatmaps, cfg=None, with_morf=True, sample_ids=None, chunk=2048):
    """Score ``heatmaps`` against ``model`` on ``images``; returns a :class:`MetricReport`."""
    cfg = (cfg or MetricConfig()).validate()
    images = np.asarray(images, np.float32)
    heatmaps = np.asarray(heatmaps)
    labels = np.asarray(labels)
    if images.ndim == 3:
        images = images[:, None]
    if len(images) != len(heatmaps) or len(images) != len(labels):
        raise DataError(f"{len(images)} images, {len(labels)} labels and {len(heatmaps)} heatmaps")
    if images.shape[-2:] != heatmaps.shape[-2:]:
        raise DimensionError(f"heatmaps {heatmaps.shape[1:]} do not match images {images.shape[-2:]}")
    if heatmaps.size and (heatmaps.min() < 0 or heatmaps.max() > 1):
        raise DataError("heatmap values must lie in [0, 1]")
    n = len(images)
    layout = _Layout(cfg, int(np.prod(images.shape[-2:])), with_morf)
    fill = np.float32(cfg.baseline_fill)
    scores = np.empty((n, layout.size), np.float64)
    per_chunk = max(1, chunk // layout.size)
    for s in range(0, n, per_chunk):
        idx = range(s, min(n, s + per_chunk))
        masks = np.stack([_mask_stack(heatmaps[i], layout, cfg) for i in idx])  # (b, K, H, W)
        batch = np.where(masks[:, :, None], images[list(idx)][:, None], fill)
        batch = batch.reshape((-1,) + images.shape[1:])
        lab = np.repeat(labels[list(idx)], layout.size)
        scores[s:s + len(idx)] = sample_scores(model, batch, lab, cfg.score_mode).reshape(len(idx), layout.size)

    def col(name):
        return scores[:, layout.slices[name]]

    v = {}
    v["show_gt"] = col("show_gt")[:, 0]
    v["show_lt"] = col("show_lt")[:, 0]
    v["auc_show"] = np.array([trapezoid_auc(r, layout.grid) for r in col("show_curve")])
    v["auc_hide"] = np.array([trapezoid_auc(r, layout.grid) for r in col("hide_curve")])
    v["base_score"] = 0.5 * ((v["show_gt"] - v["show_lt"]) + (v["auc_show"] - v["auc_hide"]))
    v["mask_penalty"] = np.array([mask_penalty(h, cfg.alpha_min) for h in heatmaps]) if n else np.zeros(0)
    v["msi"] = v["base_score"] - v["mask_penalty"]
    if with_morf:
        full = col("full")[:, :1]
        for tag in ("px", "pct"):
            ins, dele = col(f"ins_{tag}"), col(f"del_{tag}")
            v[f"morf_insertion_{tag}"] = ins.mean(axis=1)
            v[f"morf_deletion_{tag}"] = dele.mean(axis=1)
            v[f"fid_minus_{tag}"] = (full - ins).mean(axis=1)
            v[f"fid_plus_{tag}"] = (full - dele).mean(axis=1)
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    return MetricReport(asdict(cfg), ids, v)


def base_score(model, images, labels, heatmaps, cfg=None):
    """Dataset-level (show_gt, show_lt, auc_show, auc_hide, base)."""
    agg = evaluate(model, images, labels, heatmaps, cfg, with_morf=False).aggregate()
    return tuple(agg[k] for k in ("show_gt", "show_lt", "auc_show", "auc_hide", "base_score"))


def _morf(kind, model, images, labels, heatmaps, cfg, variant):
    if variant not in ("pixel_value", "percent"):
        raise ConfigError(f"variant must be 'pixel_value' or 'percent', got {variant!r}")
    tag = "px" if variant == "pixel_value" else "pct"
    return evaluate(model, images, labels, heatmaps, cfg).aggregate()[f"{kind}_{tag}"]


def morf_insertion(model, images, labels, heatmaps, cfg=None, variant="pixel_value"):
    return _morf("morf_insertion", model, images, labels, heatmaps, cfg, variant)


def morf_deletion(model, images, labels, heatmaps, cfg=None, variant="pixel_value"):
    return _morf("morf_deletion", model, images, labels, heatmaps, cfg, variant)


def fid_minus(model, images, labels, heatmaps, cfg=None, variant="pixel_value"):
    return _morf("fid_minus", model, images, labels, heatmaps, cfg, variant)


def fid_plus(model, images, labels, heatmaps, cfg=None, variant="pixel_value"):
    return _morf("fid_plus", model, images, labels, heatmaps, cfg, variant)


# ------------------------------------------------------------------ sweep

def parse_grid(spec):
    """``"start:stop:step"`` or a (start, stop, step) tuple -> inclusive array."""
    if isinstance(spec, str):
        try:
            start, stop, step = (float(p) for p in spec.split(":"))
        except ValueError:
            raise ConfigError(f"grid must look like start:stop:step, got {spec!r}") from None
    else:
        start, stop, step = spec
    if step <= 0:
        raise ConfigError("grid step must be positive")
    n = math.floor((stop - start) / step + 1e-9)
    grid = np.array([round(start + i * step, 12) for i in range(n + 1)]) if n >= 0 else np.zeros(0)
    if len(grid) == 0:
        raise ConfigError(f"grid {spec!r} is empty")
    if grid.min() <= 0 or grid.max() >= 1:
        raise ConfigError(f"grid {spec!r} leaves (0, 1)")
    return grid


def sweep_alpha(model, images, labels, heatmaps, grid, cfg=None):
    """MSI for each alpha_min in ``grid``; ties resolve to the smaller alpha.

    Returns ``(best_alpha, rows)`` where each row has alpha_min, base_score,
    mask_penalty and msi (dataset means).
    """
    cfg = cfg or MetricConfig()
    grid = parse_grid(grid)
    rows, best, best_msi = [], None, -np.inf
    for a in grid:
        c = MetricConfig(**{**asdict(cfg), "alpha_min": float(a)})
        if c.alpha_step > 1 - a:
            c.alpha_step = round(1 - a, 12)
        agg = evaluate(model, images, labels, heatmaps, c, with_morf=False).aggregate()
        row = {"alpha_min": float(a), "base_score": agg["base_score"], "mask_penalty": agg["mask_penalty"],
               "msi": agg["msi"]}
        rows.append(row)
        if row["msi"] > best_msi:
            best, best_msi = float(a), row["msi"]
    return best, rows


# ------------------------------------------------------------------ report files

def report_rows(report, method):
    rows = []
    for i, sid in enumerate(report.sample_ids):
        row = {"sample_id": int(sid), "method": method, "alpha_min": report.config["alpha_min"]}
        for key, column in _FIELD_COLUMNS.items():
            if key in report.values:
                row[column] = float(report.values[key][i])
        rows.append(row)
    return rows


def write_report_csv(reports, path):
    """``reports`` maps method tag -> :class:`MetricReport`."""
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for method, rep in reports.items():
            for row in report_rows(rep, method):
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def write_report_json(reports, path, extra=None):
    doc = {
        "methods": {m: {_FIELD_COLUMNS.get(k, k): v for k, v in rep.aggregate().items()} for m, rep in reports.items()},
        "n_samples": {m: len(rep) for m, rep in reports.items()},
        "config": next(iter(reports.values())).config if reports else {},
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
