import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from phytosense.model import (BinMap, BoostedModel, ChecksumError, FORMAT_VERSION, LogisticParams,
                              ModelFormatError, TrainingError, TrainParams, Tree, fit_bins, load_model,
                              pipeline_search, save_model, train_hgb, train_logistic, train_ovr)
from phytosense.model.binning import MISSING_BIN
from phytosense.model.hgb import node_histograms, split_gains
from phytosense.model.persist import dumps_model, model_to_dict

FAST = TrainParams(n_trees=30, max_depth=3, min_samples_leaf=5)


def separable(rng, n=400):
    X = rng.uniform(-1, 1, size=(n, 3))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(float)
    return X, y


# --------------------------------------------------------------------------- binning


def test_binary_column_two_bins():
    bm = fit_bins(np.array([[0.0], [1.0], [1.0], [0.0]]))
    assert bm.n_bins(0) == 2
    assert bm.transform(np.array([[0.0], [1.0]])).ravel().tolist() == [0, 1]


def test_uniform_column_near_equal_populations(rng):
    x = rng.uniform(size=(255 * 40, 1))
    bm = fit_bins(x, 255)
    counts = np.bincount(bm.transform(x).ravel(), minlength=255)
    assert bm.n_bins(0) == 255
    assert counts.min() >= 39 and counts.max() <= 41


def test_apply_time_clamping_and_missing():
    bm = fit_bins(np.array([[1.0], [2.0], [3.0]]))
    out = bm.transform(np.array([[-5.0], [99.0], [np.nan]])).ravel().tolist()
    assert out == [0, 2, MISSING_BIN]


def test_every_training_value_maps_to_one_bin(rng):
    x = rng.normal(size=(1000, 2))
    bm = fit_bins(x, 16)
    b = bm.transform(x)
    assert b.max() < 16 and [bm.n_bins(j) for j in range(2)] == [16, 16]


def test_bin_errors():
    with pytest.raises(ValueError, match="empty"):
        fit_bins(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        fit_bins(np.zeros((3, 1)), max_bins=256)
    with pytest.raises(ValueError, match="strictly increasing"):
        BinMap([[1.0, 1.0]])


# --------------------------------------------------------------------------- training


def test_separable_corpus_full_training_accuracy(rng):
    X, y = separable(rng)
    model = train_hgb(X, y)
    assert np.mean(model.predict(X) == "1") == np.mean(y == 1)
    assert np.all((model.predict(X) == "1") == (y == 1))


def test_training_loss_non_increasing(rng):
    X = rng.normal(size=(600, 4))
    y = (X[:, 0] + rng.normal(size=600) > 0).astype(float)
    loss = train_hgb(X, y, params=TrainParams(n_trees=80)).history["train_loss"]
    assert len(loss) == 81
    assert all(b <= a for a, b in zip(loss, loss[1:]))


def test_null_data_validation_accuracy_near_chance(rng):
    X, Xv = rng.normal(size=(2000, 5)), rng.normal(size=(2000, 5))
    y = np.repeat([0.0, 1.0], 1000)
    yv = np.repeat([0.0, 1.0], 1000)
    rng.shuffle(y)
    rng.shuffle(yv)
    model = train_hgb(X, y, Xv, yv)
    acc = float(np.mean((model.predict_logit(Xv) >= 0) == (yv == 1)))
    assert 0.45 <= acc <= 0.55


def test_null_data_chance_without_early_stopping(rng):
    # early stopping on null data keeps ~no trees; boost the full 200 rounds instead
    X, Xv = rng.normal(size=(2000, 5)), rng.normal(size=(2000, 5))
    y, yv = rng.permutation(np.repeat([0.0, 1.0], 1000)), rng.permutation(np.repeat([0.0, 1.0], 1000))
    model = train_hgb(X, y)
    assert len(model.trees) == 200
    assert np.mean((model.predict_logit(X) >= 0) == (y == 1)) > 0.8
    acc = float(np.mean((model.predict_logit(Xv) >= 0) == (yv == 1)))
    assert 0.45 <= acc <= 0.55


def test_early_stopping_truncates_to_best_round(rng):
    X, Xv = rng.normal(size=(500, 3)), rng.normal(size=(500, 3))
    y = (rng.uniform(size=500) < 0.5).astype(float)
    yv = (rng.uniform(size=500) < 0.5).astype(float)
    model = train_hgb(X, y, Xv, yv, TrainParams(n_trees=200, early_stopping_patience=5))
    h = model.history
    assert len(model.trees) == h["best_round"]
    assert len(h["val_loss"]) <= h["best_round"] + 6
    assert h["val_loss"][h["best_round"]] == min(h["val_loss"])


def test_depth_one_tree_recovers_perfect_binary_split(rng):
    X = np.column_stack([rng.normal(size=200), np.repeat([0.0, 1.0], 100), rng.normal(size=200)])
    y = X[:, 1].copy()
    model = train_hgb(X, y, params=TrainParams(n_trees=1, max_depth=1, min_samples_leaf=1))
    tree = model.trees[0]
    assert tree.feature[0] == 1 and tree.threshold[0] == 0
    # leaf values are the Newton steps -G/(H + lambda) at p = 0.5
    expected = {0: -(100 * 0.5) / (100 * 0.25 + 1.0), 1: (100 * 0.5) / (100 * 0.25 + 1.0)}
    assert tree.value[tree.left[0]] == pytest.approx(expected[0], rel=1e-12)
    assert tree.value[tree.right[0]] == pytest.approx(expected[1], rel=1e-12)


def test_histogram_gain_equals_raw_partition_gain(rng):
    # distinct-value columns: each bin holds exactly one raw value
    x = rng.permutation(40).astype(float)[:, None]
    g, h = rng.normal(size=40), rng.uniform(0.1, 0.3, size=40)
    xb = fit_bins(x).transform(x)
    lam = 1.0
    gains = split_gains(node_histograms(xb, g, h), g.sum(), h.sum(), lam, 3)
    G, H = math.fsum(g), math.fsum(h)
    for k, t in enumerate(sorted(x[:, 0])[:-1]):
        left = x[:, 0] <= t
        gl, hl = math.fsum(g[left]), math.fsum(h[left])
        nl = int(left.sum())
        raw = 0.5 * (gl**2 / (hl + lam) + (G - gl)**2 / (H - hl + lam) - G**2 / (H + lam))
        if nl < 3 or 40 - nl < 3:
            assert gains[0, k] == -np.inf
        else:
            assert gains[0, k] == pytest.approx(raw, rel=1e-10, abs=1e-12)


def test_row_order_invariance(rng):
    X = rng.normal(size=(300, 3))
    y = (X[:, 0] * X[:, 1] > 0).astype(float)
    perm = rng.permutation(300)
    a = train_hgb(X, y, params=FAST)
    b = train_hgb(X[perm], y[perm], params=FAST)
    probe = rng.normal(size=(200, 3))
    np.testing.assert_array_equal(a.predict_logit(probe), b.predict_logit(probe))


def test_single_class_is_error(rng):
    with pytest.raises(TrainingError, match="single class"):
        train_hgb(rng.normal(size=(10, 2)), np.ones(10))


def test_string_labels_and_classes(rng):
    X, y = separable(rng, 200)
    labels = np.where(y == 1, "stressed", "healthy")
    model = train_hgb(X, labels, params=FAST)
    assert model.classes == ("healthy", "stressed")
    assert set(model.predict(X)) <= {"healthy", "stressed"}
    with pytest.raises(TrainingError, match="2 classes"):
        train_hgb(X, np.array(["a", "b", "c"] * 66 + ["a", "b"]))


# --------------------------------------------------------------------------- prediction


def stump_model():
    tree = Tree(np.array([0, -1, -1]), np.array([1, 0, 0]), np.array([1, -1, -1]),
                np.array([2, -1, -1]), np.array([0.0, -2.0, 3.0]))
    return BoostedModel([tree], 0.25, 0.1, BinMap([[0.5, 1.5, 2.5]]), ["x"], classes=("h", "s"))


def test_hand_traced_tree_walk():
    m = stump_model()
    # bins: 0.0 -> 0, 1.0 -> 1 (left), 2.0 -> 2 (right)
    logits = m.predict_logit(np.array([[0.0], [1.0], [2.0]]))
    assert logits.tolist() == [0.25 + 0.1 * -2.0, 0.25 + 0.1 * -2.0, 0.25 + 0.1 * 3.0]
    assert m.predict_proba([[2.0]])[0] == expit(0.25 + 0.1 * 3.0)
    assert m.predict_logit({"x": 2.0})[0] == 0.25 + 0.1 * 3.0


def test_zero_trees_probability_is_sigmoid_base(rng):
    m = BoostedModel([], -0.7, 0.1, BinMap([[0.0]]), ["x"])
    assert np.all(m.predict_proba(rng.normal(size=(5, 1))) == expit(-0.7))


def test_manifest_mismatch_errors():
    m = stump_model()
    with pytest.raises(KeyError, match="x"):
        m.predict_logit({"y": 1.0})
    with pytest.raises(ValueError, match="expected 1 features"):
        m.predict_logit(np.zeros((2, 3)))


def test_model_invariants_checked():
    t = Tree(np.array([3, -1, -1]), np.array([0, 0, 0]), np.array([1, -1, -1]), np.array([2, -1, -1]),
             np.zeros(3))
    with pytest.raises(ValueError, match="manifest"):
        BoostedModel([t], 0.0, 0.1, BinMap([[0.0]]), ["x"])
    with pytest.raises(ValueError, match="temperature"):
        BoostedModel([], 0.0, 0.1, BinMap([[0.0]]), ["x"], temperature=0.0)


@settings(max_examples=30)
@given(st.floats(0.05, 20.0))
def test_temperature_never_changes_predicted_side(t):
    m = stump_model()
    X = np.array([[0.0], [3.0]])
    z = m.predict_logit(X)
    assert np.array_equal(m.predict_proba(X, t) >= 0.5, z >= 0)


# --------------------------------------------------------------------------- persistence


def trained(rng):
    X = rng.normal(size=(400, 4))
    y = (X[:, 0] - X[:, 2] + 0.3 * rng.normal(size=400) > 0).astype(float)
    return train_hgb(X, y, params=FAST, feature_names=list("abcd"))


def test_round_trip_bit_identical(tmp_path, rng):
    m = trained(rng)
    m.temperature = 1.37
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    probe = rng.normal(size=(1000, 4)) * 2
    np.testing.assert_array_equal(back.predict_logit(probe), m.predict_logit(probe))
    np.testing.assert_array_equal(back.predict_proba(probe), m.predict_proba(probe))
    assert back.feature_manifest == list("abcd") and back.temperature == 1.37


def test_file_format_fields(rng):
    doc = json.loads(dumps_model(trained(rng), {"stage": "train"}))
    assert doc["format"] == FORMAT_VERSION == "phytosense-model/1"
    assert "generator_version" in doc and doc["metadata"] == {"stage": "train"}


def test_metadata_outside_checksum(rng):
    m = trained(rng)
    assert model_to_dict(m, {"a": 1})["checksum"] == model_to_dict(m)["checksum"]


def test_truncated_and_tampered_files(rng):
    text = dumps_model(trained(rng))
    with pytest.raises(ChecksumError):
        load_model(io.StringIO(text[: len(text) // 2]))
    doc = json.loads(text)
    doc["payload"]["base_score"] += 1e-9
    with pytest.raises(ChecksumError, match="mismatch"):
        load_model(io.StringIO(json.dumps(doc)))
    doc = json.loads(text)
    doc["format"] = "phytosense-model/2"
    with pytest.raises(ModelFormatError, match="unsupported"):
        load_model(io.StringIO(json.dumps(doc)))


# --------------------------------------------------------------------------- one-vs-rest and logistic


def test_one_vs_rest_three_classes(rng):
    X = rng.normal(size=(600, 2))
    y = np.where(X[:, 0] < -0.4, "a", np.where(X[:, 0] > 0.4, "c", "b"))
    m = train_ovr(X, y, params=FAST)
    assert m.classes == ["a", "b", "c"]
    p = m.predict_proba(X)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert np.mean(m.predict(X) == y) > 0.95
    np.testing.assert_array_equal(m.predict(X), np.asarray(m.classes)[np.argmax(p, axis=1)])


def test_logistic_separable_full_accuracy(rng):
    X, y = separable(rng)
    # the default 500 epochs leave points hugging the margin misclassified; run to convergence
    m = train_logistic(X, y, LogisticParams(epochs=3000, learning_rate=1.0, l2=0.0))
    assert np.all((m.predict_logit(X) >= 0) == (y == 1))
    assert np.all(m.predict(X) == np.where(y == 1, "1", "0"))


# --------------------------------------------------------------------------- search


def test_search_budget_one_returns_defaults(rng):
    X, y = separable(rng, 200)
    res = pipeline_search((X, y), (X, y), ["hgb"], budget=1)
    assert len(res.evaluations) == 1
    assert res.best.params == TrainParams().to_dict()


def test_search_best_monotone_in_budget(rng):
    X = rng.normal(size=(300, 3))
    y = (X[:, 0] + rng.normal(size=300) > 0).astype(float)
    Xv = rng.normal(size=(300, 3))
    yv = (Xv[:, 0] + rng.normal(size=300) > 0).astype(float)
    prev, prev_evals = -1.0, []
    for b in (1, 2, 3):
        res = pipeline_search((X, y), (Xv, yv), ["logistic"], budget=b, seed=4)
        assert res.evaluations[: len(prev_evals)] == prev_evals
        assert res.best.val_accuracy >= prev
        prev, prev_evals = res.best.val_accuracy, res.evaluations


def test_search_tie_prefers_logistic(rng):
    X = np.column_stack([np.repeat([-1.0, 1.0], 100), rng.normal(size=200)])
    y = (X[:, 0] > 0).astype(float)
    res = pipeline_search((X, y), (X, y), budget=1)
    assert {e.candidate: e.train_accuracy for e in res.evaluations} == {"logistic": 1.0, "hgb": 1.0}
    assert res.best.candidate == "logistic"


def test_search_errors(rng):
    X, y = separable(rng, 50)
    with pytest.raises(ValueError, match="empty"):
        pipeline_search((X, y), (X, y), [])
    with pytest.raises(ValueError, match="unknown candidate"):
        pipeline_search((X, y), (X, y), ["forest"])
    with pytest.raises(ValueError, match="budget"):
        pipeline_search((X, y), (X, y), budget=0)
