"""Acceptance criteria, one test each; a PASS/FAIL line per criterion is printed at the end."""

import contextlib
import json
import math
import time

import numpy as np
import pytest
from scipy.special import expit

from oracles import brute_force
from phytosense import analysis as A
from phytosense import calibration as C
from phytosense import features as F
from phytosense import ingest as I
from phytosense import selection as S
from phytosense import synth as Y
from phytosense.model import TrainParams, load_model, save_model, train_hgb
from phytosense.rng import substream

RESULTS: dict[int, tuple[str, bool, str]] = {}
DAY = 86400.0


@pytest.fixture(scope="module", autouse=True)
def report(request):
    yield
    lines = [f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}{'  (' + note + ')' if note else ''}"
             for n, (name, ok, note) in sorted(RESULTS.items())]
    tr = request.config.pluginmanager.getplugin("terminalreporter")
    for ln in ["", "acceptance summary"] + lines:
        if tr is not None:
            tr.write_line(ln)
        print(ln)


@contextlib.contextmanager
def criterion(n, name):
    note = {"text": ""}
    RESULTS[n] = (name, False, "")
    t0 = time.perf_counter()
    yield note
    RESULTS[n] = (name, True, note["text"] or f"{time.perf_counter() - t0:.2f} s")


def rng_for(n):
    return substream(0, "test", n)


# ----------------------------------------------------------------------------- 1


def test_01_windowing_arithmetic():
    with criterion(1, "windowing counts and horizon ratios") as note:
        series, _ = Y.generate(Y.SynthConfig())
        t0 = time.perf_counter()
        counts = {}
        for h, secs in I.HORIZONS.items():
            per_plant = [len(I.slice_windows(s, h)) for s in series]
            for s, c in zip(series, per_plant):
                assert c == math.floor(s.duration / secs)
            counts[h] = per_plant[0]
        elapsed = time.perf_counter() - t0
        assert counts == {"1min": 25920, "5min": 5184, "30min": 864, "1h": 432, "6h": 72}
        assert counts["1min"] == 5 * counts["5min"]
        assert counts["5min"] == 6 * counts["30min"]
        assert counts["30min"] == 2 * counts["1h"]
        assert counts["1h"] == 6 * counts["6h"]
        assert elapsed < 5.0
        note["text"] = f"windowing {elapsed:.2f} s"


# ----------------------------------------------------------------------------- 2


def test_02_feature_oracle_suite():
    with criterion(2, "feature extractors match brute force to 1e-9") as note:
        rng = rng_for(2)
        t0 = time.perf_counter()
        worst = 0.0
        for i in range(100):
            n = int(rng.integers(60, 400))
            kind = i % 3
            if kind == 0:
                x = rng.normal(size=n)
            elif kind == 1:
                x = np.cumsum(rng.normal(size=n)) + 50.0
            else:
                x = 3 * np.sin(np.arange(n) / 7.0) + rng.normal(0, 0.5, n)
            got = F.extract_features(x)
            ref = brute_force(x)
            for name, v in zip(F.FEATURE_NAMES, got):
                r = ref[name]
                if math.isnan(r):
                    assert math.isnan(v), name
                    continue
                err = abs(v - r) / abs(r) if r != 0 else abs(v)
                worst = max(worst, err)
                assert err <= 1e-9, (i, name, v, r)
        elapsed = time.perf_counter() - t0
        assert elapsed < 30.0
        note["text"] = f"max rel err {worst:.1e}, {elapsed:.1f} s"


# ----------------------------------------------------------------------------- 3


def test_03_scaling_and_sanitize_rules():
    with criterion(3, "inf replacement, variance filter, min-max mapping"):
        raw = np.array([[1.0, np.inf, 5.0], [3.0, 2.0, 5.0], [5.0, -np.inf, 5.0], [7.0, 4.0, 5.001]])
        clean, fill = F.sanitize(raw)
        assert fill.tolist() == [4.0, 3.0, 5.00025]
        assert clean[:, 1].tolist() == [3.0, 2.0, 3.0, 4.0]
        kept, mask = F.variance_filter(clean, 0.01)
        # variances: 5.0, 0.5, ~1.9e-7
        assert mask.tolist() == [True, True, False]
        lo, hi = F.minmax_fit(kept)
        out = F.minmax_apply(kept, lo, hi)
        assert out.tolist() == [[0.0, 0.5], [1 / 3, 0.0], [2 / 3, 0.5], [1.0, 1.0]]
        beyond = F.minmax_apply(np.array([[100.0, -100.0]]), lo, hi)
        assert beyond.tolist() == [[1.0, 0.0]]


# ----------------------------------------------------------------------------- 4


def test_04_mutual_information_sanity():
    with criterion(4, "MI of label copy and of an independent feature") as note:
        rng = rng_for(4)
        y = np.repeat([0, 1], 5000)
        rng.shuffle(y)
        mi_copy = S.mutual_information(y.astype(float), y)
        mi_null = S.mutual_information(rng.normal(size=10_000), y)
        assert abs(mi_copy - math.log(2)) <= 1e-6
        assert mi_null < 0.02
        note["text"] = f"copy {mi_copy:.6f}, independent {mi_null:.4f} nats"


# ----------------------------------------------------------------------------- 5


def test_05_sbs_correctness():
    with criterion(5, "SBS removal order and fit count"):
        rng = rng_for(5)
        plants = np.repeat([f"P{i:02d}" for i in range(10)], 30)
        y = rng.integers(0, 2, plants.size)
        X = np.column_stack([y + rng.normal(0, 0.05, y.size),
                             0.5 * y + rng.normal(0, 0.3, y.size),
                             rng.normal(0, 3.0, y.size)])

        def one_nn(Xtr, ytr):
            return lambda Xq: ytr[np.argmin(((Xq[:, None, :] - Xtr[None]) ** 2).sum(axis=2), axis=1)]

        traj = S.sbs(X, y, plants, one_nn, feature_names=["perfect", "weak", "noise"])
        assert traj.removal_order == ["noise", "weak"]
        assert traj.steps[-1].features == ["perfect"]
        for d in range(2, 9):
            t = S.sbs(rng.normal(size=(40, d)), np.tile([0, 1], 20), np.repeat(list("ABCDE"), 8),
                      one_nn, k_folds=5)
            assert t.removal_evaluations == d * (d + 1) // 2 - 1
        assert S.sbs_fit_count(100) == 5049


# ----------------------------------------------------------------------------- 6


def test_06_hgb_training():
    with criterion(6, "HGB separable fit, monotone loss, null accuracy") as note:
        rng = rng_for(6)
        X = rng.uniform(-1, 1, size=(500, 4))
        y = (X[:, 0] - 0.7 * X[:, 2] > 0).astype(float)
        model = train_hgb(X, y)
        assert np.all((model.predict_logit(X) >= 0) == (y == 1))
        loss = model.history["train_loss"]
        assert all(b <= a for a, b in zip(loss, loss[1:]))
        Xn, Xv = rng.normal(size=(2000, 5)), rng.normal(size=(2000, 5))
        yn, yv = np.repeat([0.0, 1.0], 1000), np.repeat([0.0, 1.0], 1000)
        rng.shuffle(yn)
        rng.shuffle(yv)
        null = train_hgb(Xn, yn, Xv, yv)
        acc = float(np.mean((null.predict_logit(Xv) >= 0) == (yv == 1)))
        assert 0.45 <= acc <= 0.55
        note["text"] = f"null validation accuracy {acc:.3f}"


# ----------------------------------------------------------------------------- 7


def test_07_calibration():
    with criterion(7, "temperature recovers 2x overconfidence") as note:
        t0 = time.perf_counter()
        rng = rng_for(7)
        z = rng.normal(0, 3, 10_000)
        y = (rng.uniform(size=z.size) < expit(z / 2)).astype(float)
        r = C.calibration_report(z, y, 20)
        assert abs(r.temperature - 2.0) <= 0.15
        assert r.accuracy_before == r.accuracy_after
        assert r.ace_after < r.ace_before
        assert r.brier_after <= r.brier_before and r.nll_after <= r.nll_before
        elapsed = time.perf_counter() - t0
        assert elapsed < 10.0
        note["text"] = f"T={r.temperature:.4f}, {elapsed:.2f} s"


# ----------------------------------------------------------------------------- 8


def test_08_metric_oracles():
    with criterion(8, "Brier, AP hand cases and random AUPRC") as note:
        assert abs(C.brier([0.8, 0.3, 0.6], [1, 0, 0]) - 0.16333333333333333) <= 1e-12
        curve = A.pr_curve([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0], positive_class=1)
        assert abs(A.auprc(curve) - 0.8333333333333334) <= 1e-12
        rng = rng_for(8)
        y = np.repeat([0, 1], 5000)
        rand = A.auprc(A.pr_curve(rng.uniform(size=10_000), y, positive_class=1))
        assert abs(rand - 0.5) <= 0.05
        note["text"] = f"random AUPRC {rand:.4f}"


# ----------------------------------------------------------------------------- 9


def test_09_lowess():
    with criterion(9, "LOWESS affine reproduction, denoising, 24 h peak"):
        rng = rng_for(9)
        xs = np.sort(rng.uniform(0, 1000, 300))
        for frac in (0.04, 0.2, 0.5, 1.0):
            ys = 3.0 - 0.02 * xs
            assert np.max(np.abs(A.lowess(xs, ys, frac) - ys)) <= 1e-9
        t = np.arange(0, 14 * DAY, 300.0)
        clean = 0.5 + 0.3 * np.sin(2 * np.pi * t / DAY)
        noisy = clean + rng.normal(0, 0.1, t.size)
        smooth = A.lowess(t, noisy, 0.04)
        assert np.sqrt(np.mean((smooth - clean) ** 2)) < np.sqrt(np.mean((noisy - clean) ** 2))
        tt = np.arange(0, 12 * DAY, 600.0)
        cert = 0.2 + 0.3 * tt / tt[-1] + 0.15 * np.sin(2 * np.pi * tt / DAY) + rng.normal(0, 0.05, tt.size)
        v = A.smooth_t2(tt, cert, 0.04).values
        mag = np.abs(np.fft.rfft(v - v.mean()))
        freqs = np.fft.rfftfreq(v.size, d=600.0)
        assert freqs[1 + np.argmax(mag[1:])] == pytest.approx(1 / DAY, rel=0.05)


# ----------------------------------------------------------------------------- 10


def test_10_end_to_end_transition(pipeline_runs):
    with criterion(10, "stressed groups cross 0.5 near onset, control never") as note:
        run = pipeline_runs[1]
        assert run["code"] == 0
        doc = json.loads((run["workdir"] / "transitions.json").read_text())
        groups = doc["groups"]
        delays = {}
        for g in ("saturated", "ml200", "ml100"):
            assert groups[g]["transition"] is not None, g
            delays[g] = groups[g]["delay_days"]
            assert abs(delays[g]) <= 1.0, (g, delays[g])
        assert groups["ml400"]["transition"] is None
        assert groups["ml400"]["max_certainty"] < 0.5
        assert run["seconds"] < 300
        note["text"] = (", ".join(f"{g} {d:+.3f} d" for g, d in delays.items())
                        + f", control max {groups['ml400']['max_certainty']:.3f}, {run['seconds']:.0f} s")


# ----------------------------------------------------------------------------- 11


def test_11_determinism(pipeline_runs):
    with criterion(11, "byte-identical artifacts across runs and --jobs") as note:
        a, b = pipeline_runs[1], pipeline_runs[2]
        assert a["code"] == b["code"] == 0
        names_a = sorted(p.name for p in a["workdir"].iterdir())
        names_b = sorted(p.name for p in b["workdir"].iterdir())
        assert names_a == names_b
        for name in names_a:
            assert (a["workdir"] / name).read_bytes() == (b["workdir"] / name).read_bytes(), name
        note["text"] = f"{len(names_a)} files identical"


# ----------------------------------------------------------------------------- 12


def test_12_model_round_trip(pipeline_runs, tmp_path):
    with criterion(12, "save/load/predict bit-identical on 1,000 vectors"):
        model = load_model(pipeline_runs[1]["workdir"] / "model_calibrated.json")
        save_model(model, tmp_path / "again.json")
        back = load_model(tmp_path / "again.json")
        X = rng_for(12).uniform(-0.2, 1.2, size=(1000, len(model.feature_manifest)))
        assert np.array_equal(back.predict_logit(X), model.predict_logit(X))
        assert np.array_equal(back.predict_proba(X), model.predict_proba(X))
        toy = train_hgb(X, (X[:, 0] > 0.5).astype(float), params=TrainParams(n_trees=20))
        save_model(toy, tmp_path / "toy.json")
        assert np.array_equal(load_model(tmp_path / "toy.json").predict_logit(X), toy.predict_logit(X))
