"""``msilax`` command line.

Exit codes: 0 success, 2 usage or configuration error, 3 data, format or I/O
error, 4 training divergence.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from msilax import __version__
from msilax.config import RunConfig
from msilax.datagen import generate_synthetic, load_dataset, save_dataset
from msilax.errors import ConfigError, DataError, DimensionError, TrainingError, UsageError
from msilax.explainers import (
    METHODS, explain_batch, lax_explain, load_adapter, load_heatmaps, save_adapter, save_heatmaps, train_lax,
)
from msilax.metrics import evaluate as evaluate_metrics, sweep_alpha, write_report_csv, write_report_json
from msilax.models import load_weights, save_weights, train_classifier
from msilax.render import render_panels, save_png

log = logging.getLogger("msilax")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _config(args, flag_map):
    """Resolve defaults < --config < --set < dedicated flags."""
    cfg = RunConfig.load(args.config, args.set)
    for attr, (section, key) in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set(section, key, value)
    return cfg


def _write_config_beside(path, cfg):
    Path(str(path) + ".config.ini").write_text(cfg.to_ini())


def _limit(batch, n):
    return batch if n is None else batch.subset(np.arange(min(n, len(batch))))


def _out(msg):
    print(msg, flush=True)


# ------------------------------------------------------------------ commands

def cmd_gen_data(args):
    cfg = _config(args, {"seed": ("data", "seed"), "count": ("data", "count"), "size": ("data", "image_size")})
    batch = generate_synthetic(cfg.dataset_spec(), offset=args.offset)
    batch.meta["offset"] = args.offset
    save_dataset(batch, args.out)
    _write_config_beside(args.out, cfg)
    counts = batch.class_counts()
    _out(f"wrote {len(batch)} samples to {args.out}")
    _out("class counts: " + " ".join(f"{c}:{n}" for c, n in enumerate(counts)))


def cmd_train_base(args):
    cfg = _config(args, {"epochs": ("train", "epochs"), "lr": ("train", "lr"),
                         "batch_size": ("train", "batch_size"), "seed": ("train", "seed")})
    train = load_dataset(args.data)
    test = load_dataset(args.test_data) if args.test_data else None
    model = train_classifier(train, cfg.train_config(), test=test, log=log.info)
    model.meta["resolved_config"] = cfg.to_dict()
    if not args.no_freeze:
        model.freeze()
    save_weights(model, args.out_model)
    _out(f"train_accuracy {model.meta['train_accuracy']:.4f}")
    if "test_accuracy" in model.meta:
        _out(f"test_accuracy {model.meta['test_accuracy']:.4f}")
    _out(f"wrote {'frozen' if model.frozen else 'trainable'} classifier to {args.out_model}")


def cmd_train_lax(args):
    cfg = _config(args, {"epochs": ("lax", "epochs"), "lr": ("lax", "lr"), "lambda_entropy": ("lax", "lambda_entropy"),
                         "temperature": ("lax", "temperature"), "batch_size": ("lax", "batch_size"),
                         "seed": ("lax", "seed")})
    model = load_weights(args.model)
    if not model.frozen:
        raise UsageError(f"{args.model} is not frozen; retrain without --no-freeze")
    data = load_dataset(args.data)
    adapter = train_lax(model, data, cfg.lax_config(), log=log.info)
    adapter.meta["resolved_config"] = cfg.to_dict()
    save_adapter(adapter, args.out_adapter)
    last = adapter.meta["history"][-1] if adapter.meta["history"] else None
    if last:
        _out(f"masked_accuracy {last['masked_accuracy']:.4f} mean_mask {last['mean_mask']:.4f}")
    _out(f"wrote adapter to {args.out_adapter}")


def cmd_explain(args):
    cfg = _config(args, {"seed": ("explain", "seed"), "patch": ("explain", "occlusion_patch"),
                         "stride": ("explain", "occlusion_stride"), "n_masks": ("explain", "rise_n_masks")})
    if args.method == "lax" and not args.adapter:
        raise UsageError("--method lax requires --adapter")
    data = _limit(load_dataset(args.data), args.limit)
    model = load_weights(args.model)
    opts = cfg.explain_options()
    if args.method == "lax":
        if not model.frozen:
            raise UsageError(f"{args.model} is not frozen")
        hm = lax_explain(model, load_adapter(args.adapter), data.images)
    else:
        hm = explain_batch(args.method, model, data, seed=opts["seed"], occlusion=opts["occlusion"], rise=opts["rise"])
    hm.check_range()
    save_heatmaps(hm, args.out)
    _write_config_beside(args.out, cfg)
    _out(f"wrote {len(hm)} {args.method} heatmaps to {args.out} (mean value {float(hm.values.mean()):.4f})")


def _load_maps(paths, n):
    maps = {}
    for p in paths:
        hm = load_heatmaps(p)
        if len(hm) != n:
            raise DataError(f"{p} holds {len(hm)} heatmaps but {n} samples were selected")
        tag, k = hm.method, 2
        while tag in maps:
            tag, k = f"{hm.method}_{k}", k + 1
        maps[tag] = hm
    return maps


def cmd_evaluate(args):
    cfg = _config(args, {"alpha_min": ("metrics", "alpha_min"), "score_mode": ("metrics", "score_mode")})
    mcfg = cfg.metric_config()
    data = _limit(load_dataset(args.data), args.limit)
    model = load_weights(args.model)
    maps = _load_maps(args.heatmaps, len(data))
    reports = {}
    for tag, hm in maps.items():
        reports[tag] = evaluate_metrics(model, data.images, data.labels, hm.values, mcfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report_csv(reports, out / "report.csv")
    write_report_json(reports, out / "report.json", extra={"resolved_config": cfg.to_dict()})
    _out(f"{'method':<12} {'base':>8} {'penalty':>8} {'msi':>8} {'ins_px':>8} {'del_px':>8}")
    for tag, rep in reports.items():
        a = rep.aggregate()
        _out(f"{tag:<12} {a['base_score']:8.4f} {a['mask_penalty']:8.4f} {a['msi']:8.4f} "
             f"{a['morf_insertion_px']:8.4f} {a['morf_deletion_px']:8.4f}")
    _out(f"wrote {out / 'report.csv'} and {out / 'report.json'}")


def cmd_sweep_alpha(args):
    cfg = _config(args, {"score_mode": ("metrics", "score_mode")})
    data = _limit(load_dataset(args.data), args.limit)
    model = load_weights(args.model)
    (tag, hm), = _load_maps([args.heatmaps], len(data)).items()
    best, rows = sweep_alpha(model, data.images, data.labels, hm.values, args.grid, cfg.metric_config())
    _out(f"{'alpha_min':>9} {'base':>8} {'penalty':>8} {'msi':>8}")
    for r in rows:
        _out(f"{r['alpha_min']:9.4f} {r['base_score']:8.4f} {r['mask_penalty']:8.4f} {r['msi']:8.4f}")
    best_row = next(r for r in rows if r["alpha_min"] == best)
    _out(f"best_alpha_min {best:.4f} msi {best_row['msi']:.4f}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump({"method": tag, "grid": args.grid, "best_alpha_min": best, "rows": rows,
                       "resolved_config": cfg.to_dict()}, f, indent=2, sort_keys=True)
            f.write("\n")


def cmd_render(args):
    cfg = _config(args, {"alpha_min": ("metrics", "alpha_min")})
    data = load_dataset(args.data)
    hm = load_heatmaps(args.heatmap)
    i = args.image_index
    if not 0 <= i < min(len(data), len(hm)):
        raise DataError(f"image index {i} out of range (dataset {len(data)}, heatmaps {len(hm)})")
    arr = render_panels(data.images[i], hm.values[i], cfg.metrics.alpha_min, scale=args.scale)
    save_png(arr, args.out, {"msilax:method": hm.method, "msilax:index": i,
                             "msilax:alpha_min": cfg.metrics.alpha_min, "msilax:label": int(data.labels[i])})
    _out(f"wrote {arr.shape[1]}x{arr.shape[0]} PNG to {args.out}")


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="msilax", description="Heatmap explanations and MSI scoring.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI file with [data] [train] [lax] [metrics] [explain] [run]")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
        return sp

    g = common(sub.add_parser("gen-data", help="write a synthetic digit dataset"))
    g.add_argument("--seed", type=int)
    g.add_argument("--count", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--offset", type=int, default=0, help="index of the first sample in the seeded stream")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = common(sub.add_parser("train-base", help="train the classifier"))
    t.add_argument("--data", required=True)
    t.add_argument("--test-data")
    t.add_argument("--out-model", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-freeze", action="store_true", help="save the model as trainable")
    t.set_defaults(func=cmd_train_base)

    x = common(sub.add_parser("train-lax", help="train the LAX adapter on a frozen classifier"))
    x.add_argument("--model", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out-adapter", required=True)
    x.add_argument("--epochs", type=int)
    x.add_argument("--lr", type=float)
    x.add_argument("--lambda", dest="lambda_entropy", type=float)
    x.add_argument("--temperature", type=float)
    x.add_argument("--batch-size", type=int)
    x.add_argument("--seed", type=int)
    x.set_defaults(func=cmd_train_lax)

    e = common(sub.add_parser("explain", help="write heatmaps for every sample"))
    e.add_argument("--method", required=True, choices=METHODS)
    e.add_argument("--model", required=True)
    e.add_argument("--adapter")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--limit", type=int, help="only the first N samples")
    e.add_argument("--seed", type=int)
    e.add_argument("--patch", type=int)
    e.add_argument("--stride", type=int)
    e.add_argument("--n-masks", type=int)
    e.set_defaults(func=cmd_explain)

    v = common(sub.add_parser("evaluate", help="score heatmaps; writes report.csv and report.json"))
    v.add_argument("--model", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--heatmaps", required=True, action="append", help="heatmap file (repeatable)")
    v.add_argument("--alpha-min", type=float)
    v.add_argument("--score-mode", choices=("accuracy", "true_class_probability"))
    v.add_argument("--limit", type=int)
    v.add_argument("--out-dir", required=True)
    v.set_defaults(func=cmd_evaluate)

    s = common(sub.add_parser("sweep-alpha", help="MSI over an alpha_min grid"))
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--heatmaps", required=True)
    s.add_argument("--grid", default="0.1:0.9:0.1", help="start:stop:step (inclusive)")
    s.add_argument("--score-mode", choices=("accuracy", "true_class_probability"))
    s.add_argument("--limit", type=int)
    s.add_argument("--out", help="optional JSON with the table")
    s.set_defaults(func=cmd_sweep_alpha)

    r = common(sub.add_parser("render", help="four-panel PNG for one sample"))
    r.add_argument("--image-index", type=int, required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--heatmap", required=True)
    r.add_argument("--alpha-min", type=float)
    r.add_argument("--scale", type=int, default=4)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"msilax: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DimensionError, OSError) as e:
        print(f"msilax: error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as e:
        print(f"msilax: error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
