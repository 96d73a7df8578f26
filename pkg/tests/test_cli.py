import csv
import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from msilax.cli import main
from msilax.config import RunConfig
from msilax.datagen import load_dataset
from msilax.errors import ConfigError
from msilax.explainers import HeatmapSet, load_heatmaps, save_heatmaps
from msilax.models import load_weights
from msilax.render import HOT, render_panels


def sha(p):
    return hashlib.sha256(open(p, "rb").read()).hexdigest()


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """A tiny dataset and a one-epoch frozen model shared by the CLI tests."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--seed", "3", "--count", "24", "--out", str(d / "data.bin")]) == 0
    assert main(["train-base", "--data", str(d / "data.bin"), "--epochs", "1", "--out-model", str(d / "m.bin")]) == 0
    return d


# ------------------------------------------------------------------ config

def test_config_precedence_and_round_trip(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[train]\nepochs = 7\nlr = 0.01\n[run]\nseed = 42\n")
    cfg = RunConfig.load(ini, ["train.epochs=3"])
    assert cfg.train_config().epochs == 3 and cfg.train_config().lr == 0.01
    assert cfg.train_config().seed == 42 and cfg.dataset_spec().seed == 42
    again = RunConfig().update_from_ini(cfg.to_ini())
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("bad", ["nosuch.key=1", "train.nokey=1", "train.epochs=abc", "trainepochs"])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        RunConfig.load(None, [bad])


# ------------------------------------------------------------------ gen-data

def test_gen_data_header_determinism_and_counts(tmp_path, capsys):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    assert main(["gen-data", "--seed", "1", "--count", "100", "--out", str(a)]) == 0
    assert "class counts" in capsys.readouterr().out
    assert main(["gen-data", "--seed", "1", "--count", "100", "--out", str(b)]) == 0
    assert len(load_dataset(a)) == 100
    assert sha(a) == sha(b)
    assert (tmp_path / "a.bin.config.ini").exists()


def test_gen_data_too_small_is_usage_error(tmp_path):
    assert main(["gen-data", "--size", "8", "--count", "2", "--out", str(tmp_path / "x.bin")]) == 2


def test_unwritable_path_is_io_error(tmp_path):
    assert main(["gen-data", "--count", "2", "--out", str(tmp_path / "no" / "dir" / "x.bin")]) == 3


def test_bad_arguments_exit_2():
    assert main(["explain"]) == 2
    assert main(["frobnicate"]) == 2


# ------------------------------------------------------------------ training

def test_train_base_epochs_zero_is_initialisation(work, tmp_path):
    from msilax.models import Classifier
    assert main(["train-base", "--data", str(work / "data.bin"), "--set", "train.epochs=0",
                 "--seed", "5", "--out-model", str(tmp_path / "z.bin")]) == 0
    m = load_weights(tmp_path / "z.bin")
    assert m.frozen
    assert m.state_hash() == Classifier(m.arch, seed=5).state_hash()


def test_train_lax_keeps_classifier_bytes(work, tmp_path, capsys):
    before = sha(work / "m.bin")
    assert main(["train-lax", "--model", str(work / "m.bin"), "--data", str(work / "data.bin"),
                 "--epochs", "1", "--out-adapter", str(tmp_path / "a.bin")]) == 0
    assert "mean_mask" in capsys.readouterr().out
    assert sha(work / "m.bin") == before


def test_train_lax_refuses_unfrozen_model(work, tmp_path):
    assert main(["train-base", "--data", str(work / "data.bin"), "--epochs", "0", "--no-freeze",
                 "--out-model", str(tmp_path / "u.bin")]) == 0
    assert main(["train-lax", "--model", str(tmp_path / "u.bin"), "--data", str(work / "data.bin"),
                 "--epochs", "1", "--out-adapter", str(tmp_path / "a.bin")]) == 2


def test_missing_inputs_exit_3(work, tmp_path):
    assert main(["train-lax", "--model", str(tmp_path / "none.bin"), "--data", str(work / "data.bin"),
                 "--out-adapter", str(tmp_path / "a.bin")]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_training_exits_4(work, tmp_path):
    assert main(["train-base", "--data", str(work / "data.bin"), "--lr", "1e30", "--epochs", "3",
                 "--out-model", str(tmp_path / "n.bin")]) == 4


# ------------------------------------------------------------------ explain / evaluate / sweep / render

def test_explain_random_reproducible(work, tmp_path):
    args = ["explain", "--method", "random", "--model", str(work / "m.bin"), "--data", str(work / "data.bin")]
    assert main(args + ["--out", str(tmp_path / "r1.bin")]) == 0
    assert main(args + ["--out", str(tmp_path / "r2.bin")]) == 0
    assert sha(tmp_path / "r1.bin") == sha(tmp_path / "r2.bin")


def test_explain_lax_needs_adapter(work, tmp_path):
    assert main(["explain", "--method", "lax", "--model", str(work / "m.bin"), "--data", str(work / "data.bin"),
                 "--out", str(tmp_path / "h.bin")]) == 2


def test_explain_occlusion_ten_samples(work, tmp_path):
    out = tmp_path / "o.bin"
    assert main(["explain", "--method", "occlusion", "--model", str(work / "m.bin"), "--data", str(work / "data.bin"),
                 "--limit", "10", "--patch", "8", "--stride", "4", "--out", str(out)]) == 0
    hm = load_heatmaps(out)
    assert hm.values.shape == (10, 32, 32)
    assert hm.values.min() >= 0 and hm.values.max() <= 1


def test_evaluate_two_methods_and_identity(work, tmp_path, capsys):
    for method in ("random", "rise"):
        assert main(["explain", "--method", method, "--model", str(work / "m.bin"), "--data", str(work / "data.bin"),
                     "--n-masks", "20", "--limit", "6", "--out", str(tmp_path / f"{method}.bin")]) == 0
    assert main(["evaluate", "--model", str(work / "m.bin"), "--data", str(work / "data.bin"), "--limit", "6",
                 "--heatmaps", str(tmp_path / "random.bin"), "--heatmaps", str(tmp_path / "rise.bin"),
                 "--out-dir", str(tmp_path / "rep")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "rep" / "report.csv")))
    assert {r["method"] for r in rows} == {"random", "rise"} and len(rows) == 12
    for r in rows:
        assert float(r["msi"]) == float(r["base_score"]) - float(r["mask_penalty"])
    doc = json.load(open(tmp_path / "rep" / "report.json"))
    assert doc["resolved_config"]["metrics"]["alpha_min"] == 0.5


def test_evaluate_count_mismatch_exit_3(work, tmp_path):
    save_heatmaps(HeatmapSet(np.zeros((3, 32, 32)), "zeros"), tmp_path / "z.bin")
    assert main(["evaluate", "--model", str(work / "m.bin"), "--data", str(work / "data.bin"),
                 "--heatmaps", str(tmp_path / "z.bin"), "--out-dir", str(tmp_path / "rep")]) == 3


def test_sweep_alpha_table(work, tmp_path, capsys):
    assert main(["explain", "--method", "random", "--model", str(work / "m.bin"), "--data", str(work / "data.bin"),
                 "--limit", "4", "--out", str(tmp_path / "r.bin")]) == 0
    capsys.readouterr()
    assert main(["sweep-alpha", "--model", str(work / "m.bin"), "--data", str(work / "data.bin"), "--limit", "4",
                 "--heatmaps", str(tmp_path / "r.bin"), "--grid", "0.3:0.7:0.1"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 1 + 5 + 1
    assert lines[-1].startswith("best_alpha_min")


def test_render_png(work, tmp_path):
    save_heatmaps(HeatmapSet(np.zeros((2, 32, 32)), "zeros"), tmp_path / "z.bin")
    args = ["render", "--image-index", "1", "--data", str(work / "data.bin"), "--heatmap", str(tmp_path / "z.bin"),
            "--scale", "1"]
    assert main(args + ["--out", str(tmp_path / "a.png")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.png")]) == 0
    assert sha(tmp_path / "a.png") == sha(tmp_path / "b.png")
    img = np.asarray(Image.open(tmp_path / "a.png"))
    assert img.shape == (32, 4 * 32 + 3 * 2, 3)
    p3 = img[:, 2 * 34:2 * 34 + 32]
    p4 = img[:, 3 * 34:3 * 34 + 32]
    p1 = img[:, :32]
    assert (p3 == 0).all()
    np.testing.assert_array_equal(p4, p1)
    assert main(args[:2] + ["99"] + args[3:] + ["--out", str(tmp_path / "c.png")]) == 3


def test_render_panel_layout_and_lut():
    assert HOT.shape == (256, 3) and tuple(HOT[0]) == (0, 0, 0) and tuple(HOT[255]) == (255, 255, 255)
    arr = render_panels(np.ones((4, 4)), np.ones((4, 4)), 0.5, scale=2, gutter=1)
    assert arr.shape == (8, 4 * 8 + 3, 3)
