import math

import numpy as np
import pytest

from msilax import numerics as nx
from msilax.datagen import DatasetSpec, generate_synthetic
from msilax.errors import ConfigError, DataError, FormatError, UsageError
from msilax.explainers import (
    HeatmapSet, LaxAdapter, LaxConfig, entropy_loss, explain_batch, lax_explain, lax_forward, lax_loss,
    load_adapter, load_heatmaps, minmax_normalize, occlusion_explain, random_explain, rise_explain, rise_masks,
    save_adapter, save_heatmaps, train_lax,
)
from msilax.models import Classifier, TrainConfig, train_classifier
from msilax.numerics import Tensor
from toys import ConstantModel


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(DatasetSpec(seed=21, count=12))


@pytest.fixture(scope="module")
def frozen():
    return Classifier(seed=3).freeze()


def _forced_adapter(bias):
    a = LaxAdapter(64)
    last = a.n_layers - 1
    a.params[f"conv{last}.weight"].data[:] = 0
    a.params[f"conv{last}.bias"].data[:] = bias
    return a


# ------------------------------------------------------------------ lax_forward

def test_all_ones_mask_is_identity(frozen, data):
    out = lax_forward(frozen, _forced_adapter(200.0), data.images[:4])
    np.testing.assert_array_equal(out.mask.data, 1.0)
    np.testing.assert_array_equal(out.masked_images.data, data.images[:4])
    np.testing.assert_array_equal(out.masked_logits.data, out.orig_logits.data)


def test_all_zeros_mask_blanks_input(frozen, data):
    out = lax_forward(frozen, _forced_adapter(-200.0), data.images[:4])
    np.testing.assert_array_equal(out.masked_images.data, 0.0)


def test_random_adapter_mask_in_open_interval(frozen, data):
    out = lax_forward(frozen, LaxAdapter(64, seed=5), data.images)
    assert out.mask_low.shape == (12, 1, 4, 4)
    assert out.mask.shape == (12, 1, 32, 32)
    assert 0 < out.mask.data.min() and out.mask.data.max() < 1
    # upsampled range is bracketed by the low-res range
    assert out.mask.data.min() >= out.mask_low.data.min() - 1e-7
    assert out.mask.data.max() <= out.mask_low.data.max() + 1e-7


def test_unfrozen_classifier_is_refused(data):
    with pytest.raises(UsageError):
        lax_forward(Classifier(), LaxAdapter(64), data.images[:1])


def test_gradients_reach_adapter_only(frozen, data):
    a = LaxAdapter(64, seed=1)
    out = lax_forward(frozen, a, data.images[:3])
    lax_loss(data.labels[:3], out.masked_logits, out.mask_low).backward()
    assert all(p.grad is None for p in frozen.params.values())
    assert all(p.grad is not None for p in a.params.values())


# ------------------------------------------------------------------ losses

def test_entropy_two_cells_matches_direct_evaluation():
    z = np.array([2.0, 0.0]) / 0.5
    p = np.exp(z - z.max())
    p /= p.sum()
    want = -float(np.sum(p * np.log(p)))
    assert p[0] == pytest.approx(0.9820, abs=1e-4) and p[1] == pytest.approx(0.0180, abs=1e-4)
    # direct evaluation gives 0.090094..., i.e. 0.0902 only to within 2e-4
    assert want == pytest.approx(0.0902, abs=2e-4)
    got = entropy_loss(Tensor(np.array([[[2.0, 0.0]]]), dtype=np.float64), t=0.5, eps=0).item()
    assert got == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("t", [0.1, 0.5, 2.0])
def test_entropy_uniform_mask_is_log_cells(t):
    m = Tensor(np.full((3, 4, 5), 0.7), dtype=np.float64)
    assert entropy_loss(m, t=t, eps=1e-12).item() == pytest.approx(math.log(20), abs=1e-9)


def test_entropy_one_hot_small_t_vanishes():
    m = np.zeros((1, 4, 4))
    m[0, 1, 2] = 1.0
    assert entropy_loss(Tensor(m, dtype=np.float64), t=0.01, eps=1e-12).item() < 1e-10


def test_entropy_rejects_nonpositive_t():
    with pytest.raises(ConfigError):
        entropy_loss(Tensor(np.ones((1, 2, 2))), t=0)


def test_entropy_minimisation_over_free_mask_concentrates_mass():
    z = Tensor(np.random.default_rng(0).random((1, 4, 4)) * 0.1, requires_grad=True, dtype=np.float64)
    opt = nx.Adam({"z": z}, lr=0.1)
    first = None
    for _ in range(200):
        loss = entropy_loss(z, t=0.5)
        first = first if first is not None else loss.item()
        loss.backward()
        opt.step()
    p = nx.softmax(Tensor(np.maximum(z.data, 0).reshape(1, -1) / 0.5, dtype=np.float64), axis=1).data
    assert loss.item() < 0.1 * first
    assert p.max() > 0.95 and np.sort(p.ravel())[-2] < 0.05


def test_entropy_bounds():
    r = np.random.default_rng(3)
    for _ in range(20):
        m = Tensor(r.random((2, 4, 4)), dtype=np.float64)
        v = entropy_loss(m, t=0.5, eps=1e-12).item()
        assert 0 <= v <= math.log(16) + 1e-9


def test_lax_loss_composition():
    r = np.random.default_rng(1)
    logits = Tensor(r.standard_normal((4, 10)), dtype=np.float64)
    mask = Tensor(r.random((4, 1, 4, 4)), dtype=np.float64)
    labels = np.array([0, 3, 5, 9])
    ce = nx.cross_entropy(logits, labels).item()
    assert lax_loss(labels, logits, mask, LaxConfig(lambda_entropy=0)).item() == ce
    ent = entropy_loss(mask, 0.5, 1e-8).item()
    assert lax_loss(labels, logits, mask).item() == pytest.approx(ce + 5 * ent, rel=1e-12)
    # confident correct prediction and a one-hot mask at tiny t: both terms vanish
    sure = np.full((1, 10), -50.0)
    sure[0, 2] = 50.0
    hot = np.zeros((1, 1, 4, 4))
    hot[0, 0, 0, 0] = 1
    cfg = LaxConfig(temperature=1e-3, epsilon=1e-12)
    assert lax_loss(np.array([2]), Tensor(sure, dtype=np.float64), Tensor(hot, dtype=np.float64), cfg).item() < 1e-9


@pytest.mark.parametrize("bad", [dict(temperature=0), dict(lambda_entropy=-1), dict(epsilon=0)])
def test_bad_lax_config(bad):
    with pytest.raises(ConfigError):
        LaxConfig(**bad).validate()


# ------------------------------------------------------------------ training

def test_train_lax_zero_epochs_and_determinism(frozen, data):
    assert train_lax(frozen, data, LaxConfig(epochs=0, seed=4)).state_hash() == LaxAdapter(64, seed=4).state_hash()
    before = frozen.state_hash()
    cfg = LaxConfig(epochs=2, batch_size=4, seed=2)
    a, b = train_lax(frozen, data, cfg), train_lax(frozen, data, cfg)
    assert a.state_hash() == b.state_hash()
    assert frozen.state_hash() == before
    assert len(a.meta["history"]) == 2 and {"masked_accuracy", "mean_mask"} <= set(a.meta["history"][0])


def test_train_lax_refuses_unfrozen(data):
    with pytest.raises(UsageError):
        train_lax(Classifier(), data, LaxConfig(epochs=1))


@pytest.fixture(scope="module")
def small_trained():
    d = generate_synthetic(DatasetSpec(seed=30, count=600))
    m = train_classifier(d, TrainConfig(epochs=6, seed=1)).freeze()
    return m, d


def test_lambda_zero_keeps_masked_accuracy(small_trained):
    m, d = small_trained
    full = m.accuracy(d.images, d.labels)
    a = train_lax(m, d, LaxConfig(lambda_entropy=0, epochs=8, seed=0))
    hm = lax_explain(m, a, d.images)
    masked = float(np.mean(hm.masked_logits.argmax(1) == d.labels))
    assert masked >= full - 0.02


def test_adapter_round_trip(tmp_path, frozen, data):
    a = train_lax(frozen, data, LaxConfig(epochs=1, batch_size=6))
    save_adapter(a, tmp_path / "a.bin")
    b = load_adapter(tmp_path / "a.bin")
    assert a.state_hash() == b.state_hash()
    assert b.meta["lax_config"]["epochs"] == 1


# ------------------------------------------------------------------ occlusion

class _Linear:
    """Softmax over two linear scores; class 1 gains from every pixel with weight w."""

    def __init__(self, w):
        self.w = np.asarray(w, float)

    def predict_proba(self, images):
        s = (np.asarray(images)[:, 0] * self.w).sum(axis=(1, 2))
        p1 = 1 / (1 + np.exp(-s))
        return np.stack([1 - p1, p1], 1)


def _occlusion_oracle(model, image, label, patch, stride):
    h, w = image.shape
    p = lambda im: model.predict_proba(im[None, None])[0, label]
    ys = sorted(set(list(range(0, h - patch + 1, stride)) + [h - patch]))
    xs = sorted(set(list(range(0, w - patch + 1, stride)) + [w - patch]))
    drops = np.zeros((h, w))
    counts = np.zeros((h, w))
    for y in ys:
        for x in xs:
            occ = image.copy()
            occ[y:y + patch, x:x + patch] = 0
            d = p(image) - p(occ)
            for i in range(y, y + patch):
                for j in range(x, x + patch):
                    drops[i, j] += d
                    counts[i, j] += 1
    sal = drops / counts
    return (sal - sal.min()) / (sal.max() - sal.min())


@pytest.mark.parametrize("patch,stride", [(2, 1), (2, 2), (3, 2), (1, 1)])
def test_occlusion_matches_window_enumeration(patch, stride):
    w = np.arange(16).reshape(4, 4) / 8 - 1
    model = _Linear(w)
    img = np.random.default_rng(patch * 10 + stride).random((4, 4)).astype(np.float32) + 0.1
    got = occlusion_explain(model, img[None], 1, patch=patch, stride=stride)
    np.testing.assert_allclose(got, _occlusion_oracle(model, img, 1, patch, stride), atol=1e-6)


def test_occlusion_constant_model_and_single_window():
    img = np.ones((1, 6, 6), np.float32)
    np.testing.assert_array_equal(occlusion_explain(ConstantModel([0.5, 0.5]), img, 0, 2, 2), 0)
    m = _Linear(np.ones((6, 6)))
    out = occlusion_explain(m, img, 1, patch=6, stride=3)
    assert np.ptp(out) == 0


def test_occlusion_config_errors():
    img = np.ones((1, 6, 6), np.float32)
    with pytest.raises(ConfigError):
        occlusion_explain(ConstantModel([1.0]), img, 0, patch=2, stride=3)
    with pytest.raises(ConfigError):
        occlusion_explain(ConstantModel([1.0]), img, 0, patch=7, stride=1)


# ------------------------------------------------------------------ RISE

def test_rise_deterministic_and_in_range(frozen, data):
    a = rise_explain(frozen, data.images[0], data.labels[0], n_masks=64, seed=3)
    b = rise_explain(frozen, data.images[0], data.labels[0], n_masks=64, seed=3)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (32, 32) and a.min() >= 0 and a.max() <= 1


def test_rise_masks_shape_and_errors():
    m = rise_masks((10, 7), 5, 3, 0.5, 0)
    assert m.shape == (5, 10, 7) and m.min() >= 0 and m.max() <= 1
    for kw in (dict(n_masks=0), dict(grid=1), dict(keep_prob=1.0)):
        args = dict(n_masks=5, grid=3, keep_prob=0.5, seed=0) | kw
        with pytest.raises(ConfigError):
            rise_masks((8, 8), **args)


def test_rise_constant_model_is_uncorrelated_with_any_target():
    target = np.add.outer(np.arange(16), np.arange(16)).astype(float)
    img = np.ones((1, 16, 16), np.float32)
    model = ConstantModel([0.4, 0.6])
    corrs = []
    for seed in range(50):
        sal = rise_explain(model, img, 1, n_masks=50, grid=4, seed=seed)
        corrs.append(np.corrcoef(sal.ravel(), target.ravel())[0, 1])
    assert abs(np.mean(corrs)) < 0.1


# ------------------------------------------------------------------ random

def test_random_explain():
    a = random_explain((10, 10), seed=1)
    np.testing.assert_array_equal(a, random_explain((10, 10), seed=1))
    assert a.min() >= 0 and a.max() <= 1
    assert abs(random_explain((100000,), seed=2).mean() - 0.5) < 0.01


def test_minmax_constant_is_zero():
    np.testing.assert_array_equal(minmax_normalize(np.full((3, 3), 4.0)), 0)


# ------------------------------------------------------------------ batch + files

def test_explain_batch_all_methods(frozen, data):
    sub = data.subset(np.arange(3))
    for method in ("occlusion", "rise", "random"):
        hm = explain_batch(method, frozen, sub, seed=0, rise={"n_masks": 32})
        assert hm.values.shape == (3, 32, 32) and hm.method == method
        hm.check_range()
    with pytest.raises(UsageError):
        explain_batch("lax", frozen, sub)
    with pytest.raises(ConfigError):
        explain_batch("gradcam", frozen, sub)


def test_heatmap_file_round_trip(tmp_path):
    hm = HeatmapSet(random_explain((3, 5, 4), 0), "random")
    save_heatmaps(hm, tmp_path / "h.bin")
    back = load_heatmaps(tmp_path / "h.bin")
    assert back.method == "random"
    assert back.values.tobytes() == hm.values.tobytes()
    raw = (tmp_path / "h.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-2])
    with pytest.raises(FormatError):
        load_heatmaps(tmp_path / "t.bin")
    (tmp_path / "m.bin").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(FormatError):
        load_heatmaps(tmp_path / "m.bin")
    with pytest.raises(DataError):
        save_heatmaps(HeatmapSet(np.full((1, 2, 2), 1.5), "bad"), tmp_path / "x.bin")
