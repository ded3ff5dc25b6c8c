"""Command-line pipeline: one subcommand per stage, files in a work directory.

Exit status: 0 success, 1 invalid configuration, 2 missing prerequisite
artifact, 3 data or processing error, 4 work directory locked by another run.
Errors are reported on stderr as a single JSON object.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import fcntl
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone

import numpy as np

from . import GENERATOR_VERSION
from . import analysis as A
from . import calibration as C
from . import features as F
from . import ingest as I
from . import selection as S
from . import synth as Y
from .config import ConfigError, PipelineConfig, load_config
from .model import TrainParams, load_model, pipeline_search, save_model, train_hgb

log = logging.getLogger("phytosense")

STAGES = ("synth", "ingest", "window", "extract", "select", "train", "calibrate", "eval", "pr", "transition")
PIPELINE = STAGES
EXTRACT_BLOCK = 512
LOCK_NAME = ".phytosense.lock"

# artifact -> stage that writes it
PRODUCER = {
    "corpus.csv": "synth", "ground_truth.json": "synth",
    "series.json": "ingest", "series_timestamps.npy": "ingest", "series_edp.npy": "ingest",
    "windows.csv": "window", "split.json": "window",
    "features_raw.csv": "extract", "features.csv": "extract", "features_manifest.json": "extract",
    "selection.json": "select", "sbs_trajectory.csv": "select",
    "model.json": "train", "train_report.json": "train", "search.json": "train",
    "model_calibrated.json": "calibrate", "calibration_report.json": "calibrate",
    "reliability_bins.csv": "calibrate",
    "eval.json": "eval",
    "pr_val.csv": "pr", "pr_test.csv": "pr", "pr_summary.json": "pr",
    "certainties.csv": "transition", "trend_plants.csv": "transition", "trend_groups.csv": "transition",
    "transitions.json": "transition",
}


class StageError(Exception):
    exit_code = 3
    kind = "processing_error"

    def payload(self) -> dict:
        return {}


class MissingArtifact(StageError):
    exit_code = 2
    kind = "missing_prerequisite"

    def __init__(self, stage: str, artifact: str, run: str):
        self.stage, self.artifact, self.run = stage, artifact, run
        super().__init__(f"{stage} needs {artifact}; run `phytosense {run}` first")

    def payload(self) -> dict:
        return {"stage": self.stage, "missing": self.artifact, "run": self.run}


class WorkdirLocked(StageError):
    exit_code = 4
    kind = "workdir_locked"


# --------------------------------------------------------------------------- helpers


def _iso(t: float | None) -> str | None:
    if t is None:
        return None
    return datetime.fromtimestamp(float(t), tz=timezone.utc).isoformat().replace("+00:00", "Z")


def _extract_block(block: np.ndarray) -> np.ndarray:
    return F.extract_matrix(block, chunk_rows=EXTRACT_BLOCK)


class Workspace:
    """Resolved config plus typed access to the artifacts of one work directory."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.dir = cfg.paths.workdir
        os.makedirs(self.dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.dir, name)

    def require(self, stage: str, *names: str) -> None:
        for name in names:
            if not os.path.exists(self.path(name)):
                raise MissingArtifact(stage, name, PRODUCER[name])

    def meta(self, stage: str, **extra) -> dict:
        return {"generator_version": GENERATOR_VERSION, "seed": self.cfg.seed, "stage": stage, **extra}

    def write_json(self, name: str, stage: str, doc: dict) -> None:
        out = {**self.meta(stage), **doc}
        with open(self.path(name), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(out, fh, sort_keys=True, indent=1, allow_nan=False)
            fh.write("\n")

    def read_json(self, name: str) -> dict:
        with open(self.path(name), encoding="utf-8") as fh:
            return json.load(fh)

    def write_rows(self, name: str, stage: str, header: list[str], rows) -> None:
        with open(self.path(name), "w", encoding="utf-8", newline="\n") as fh:
            fh.write("# " + json.dumps(self.meta(stage), sort_keys=True) + "\n")
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_cell(v) for v in row) + "\n")

    def read_rows(self, name: str) -> list[dict]:
        with open(self.path(name), encoding="utf-8", newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        return list(csv.DictReader(lines))

    def remove(self, name: str) -> None:
        with contextlib.suppress(FileNotFoundError):
            os.remove(self.path(name))

    # ------------------------------------------------------------------ typed loaders

    def load_series(self) -> tuple[dict, np.ndarray, np.ndarray]:
        doc = self.read_json("series.json")
        ts = np.load(self.path("series_timestamps.npy"), mmap_mode="r")
        edp = np.load(self.path("series_edp.npy"), mmap_mode="r")
        return doc, ts, edp

    def load_windows(self) -> list[dict]:
        return self.read_rows("windows.csv")

    def load_features(self) -> F.FeatureMatrix:
        return F.read_matrix_csv(self.path("features.csv"))


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return str(v)


def _labels_for(windows: list[dict], ids: list[str]) -> np.ndarray:
    by_id = {w["window_id"]: w["label"] for w in windows}
    return np.array([by_id[i] for i in ids])


def _partition_ids(windows: list[dict], part: str) -> list[str]:
    return [w["window_id"] for w in windows if w["partition"] == part]


# --------------------------------------------------------------------------- stages


def stage_synth(ws: Workspace) -> None:
    cfg = ws.cfg.synth_config()
    series, onsets = Y.generate(cfg)
    with open(ws.path("corpus.csv"), "wb") as fh:
        fh.write(("# " + json.dumps(ws.meta("synth"), sort_keys=True) + "\n").encode())
        I.write_csv(series, fh)
    Y.write_ground_truth(ws.path("ground_truth.json"), cfg, onsets, ws.meta("synth"))
    log.info("synth: %d plants x %d samples", len(series), len(series[0]))


def stage_ingest(ws: Workspace) -> None:
    source = ws.cfg.paths.input
    synthetic = source is None
    if synthetic:
        ws.require("ingest", "corpus.csv")
        source = ws.path("corpus.csv")
    elif not os.path.exists(source):
        raise StageError(f"input file {source} does not exist")
    series = I.parse_records(source, ws.cfg.paths.format)
    series = [I.resample(s, 1.0) for s in series]
    plants, offset = [], 0
    for s in series:
        plants.append({"plant_id": s.plant_id, "group": s.group, "offset": offset, "length": len(s),
                       "start": float(s.timestamps[0]), "end": float(s.timestamps[-1]) + 1.0})
        offset += len(s)
    np.save(ws.path("series_timestamps.npy"), np.concatenate([s.timestamps for s in series]))
    np.save(ws.path("series_edp.npy"), np.concatenate([s.edp for s in series]))
    ws.write_json("series.json", "ingest", {"source": "synth" if synthetic else os.path.basename(source),
                                             "sample_rate_hz": 1.0, "plants": plants})
    log.info("ingest: %d plants, %d samples", len(series), offset)


def _plant_arrays(doc, ts, edp):
    for p in doc["plants"]:
        a, n = p["offset"], p["length"]
        yield p, ts[a:a + n], edp[a:a + n]


def _label_ranges(ws: Workspace, doc: dict) -> tuple[list[float], list[float]]:
    lab = ws.cfg.labeling
    start = min(p["start"] for p in doc["plants"])
    end = max(p["end"] for p in doc["plants"])
    span = lab.interval_days * Y.DAY
    t1 = [I.parse_time(x) for x in lab.t1] if lab.t1 is not None else [start, start + span]
    t3 = [I.parse_time(x) for x in lab.t3] if lab.t3 is not None else [end - span, end]
    return t1, t3


def stage_window(ws: Workspace) -> None:
    ws.require("window", "series.json", "series_timestamps.npy", "series_edp.npy")
    cfg = ws.cfg
    doc, ts, edp = ws.load_series()
    windows = []
    for p, t, e in _plant_arrays(doc, ts, edp):
        s = I.SignalSeries(p["plant_id"], p["group"], np.asarray(t), np.asarray(e))
        windows.extend(I.slice_windows(s, cfg.horizon, cfg.stride))
    group_map = {p["plant_id"]: p["group"] for p in doc["plants"]}
    t1, t3 = _label_ranges(ws, doc)
    labeled = I.assign_labels(windows, cfg.labeling.scheme, t1, t3, group_map, cfg.class_map())
    unknown = sorted(set(cfg.labeling.held_out) - set(group_map))
    if unknown:
        log.warning("held-out plant(s) not in the data: %s", ", ".join(unknown))
    plan = I.make_split_plan(labeled, cfg.labeling.held_out, cfg.labeling.train_ratio, cfg.seed)
    part = {**{w: "train" for w in plan.train}, **{w: "validation" for w in plan.validation},
            **{w: "test" for w in plan.test}}
    if not plan.train or not plan.validation:
        raise StageError("split left the training or validation partition empty; check t1/t3 and held-out plants")
    ws.write_rows("windows.csv", "window",
                  ["window_id", "plant_id", "group", "start", "end", "interval", "label", "partition"],
                  ([w.window_id, w.plant_id, w.group, w.start, w.end, w.interval, w.label,
                    part.get(w.window_id, "none")] for w in labeled))
    ws.write_json("split.json", "window", {"horizon": cfg.horizon, "stride": cfg.stride,
                                           "t1": [t1[0], t1[1]], "t3": [t3[0], t3[1]],
                                           "t1_iso": [_iso(t1[0]), _iso(t1[1])],
                                           "t3_iso": [_iso(t3[0]), _iso(t3[1])],
                                           "class_map": cfg.class_map(), **plan.to_dict()})
    log.info("window: %d windows (%d train, %d validation, %d test)", len(labeled), len(plan.train),
             len(plan.validation), len(plan.test))


def _window_matrix(ws: Workspace, windows: list[dict]) -> np.ndarray:
    doc, ts, edp = ws.load_series()
    length = I.HORIZONS[ws.cfg.horizon]
    arrays = {p["plant_id"]: (t, e) for p, t, e in _plant_arrays(doc, ts, edp)}
    out = np.empty((len(windows), length))
    for i, w in enumerate(windows):
        t, e = arrays[w["plant_id"]]
        pos = int(np.searchsorted(t, float(w["start"])))
        if int(w["end"]) - int(w["start"]) != length or pos + length > t.size or t[pos] != float(w["start"]):
            raise StageError(f"window {w['window_id']} does not match the ingested series or horizon; rerun window")
        out[i] = e[pos:pos + length]
    return out


def stage_extract(ws: Workspace) -> None:
    ws.require("extract", "series.json", "windows.csv", "split.json")
    windows = ws.load_windows()
    X = _window_matrix(ws, windows)
    blocks = [X[lo:lo + EXTRACT_BLOCK] for lo in range(0, X.shape[0], EXTRACT_BLOCK)]
    if ws.cfg.jobs > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=ws.cfg.jobs) as pool:
            parts = list(pool.map(_extract_block, blocks))
    else:
        parts = [_extract_block(b) for b in blocks]
    values = np.vstack(parts) if parts else np.empty((0, len(F.CATALOG)))
    ids = [w["window_id"] for w in windows]
    raw = F.FeatureMatrix(ids, list(F.FEATURE_NAMES), values)
    state = F.fit_preprocessing(raw.rows(_partition_ids(windows, "train")), ws.cfg.variance_threshold)
    scaled = F.apply_preprocessing(raw, state)
    F.write_matrix_csv(raw, ws.path("features_raw.csv"), ws.meta("extract", scaled=False))
    F.write_matrix_csv(scaled, ws.path("features.csv"), ws.meta("extract", scaled=True))
    ws.write_json("features_manifest.json", "extract", {
        "horizon": ws.cfg.horizon,
        "catalog": [{"name": f.name, "extractor": f.extractor, "params": list(f.params)} for f in F.CATALOG],
        "scaler": state.to_dict(),
    })
    log.info("extract: %d windows x %d features, %d kept", values.shape[0], values.shape[1], len(state.kept_names))


def _sbs_train_fn(cfg: PipelineConfig):
    params = TrainParams(n_trees=cfg.selection.sbs_n_trees, max_depth=cfg.selection.sbs_max_depth, seed=cfg.seed)

    def fit(X, y):
        return train_hgb(X, y, params=params).predict
    return fit


def stage_select(ws: Workspace) -> None:
    ws.require("select", "features.csv", "windows.csv")
    cfg = ws.cfg
    windows = ws.load_windows()
    fm = ws.load_features()
    train_ids = _partition_ids(windows, "train")
    tr = fm.rows(train_ids)
    y = _labels_for(windows, train_ids)
    scores = S.mi_scores(tr.values, y)
    ranked = S.rank_by_mi(tr.values, y, fm.feature_names, cfg.selection.top_k)
    sbs_doc = None
    selected = ranked
    if cfg.selection.sbs:
        by_id = {w["window_id"]: w["plant_id"] for w in windows}
        plants = [by_id[i] for i in train_ids]
        traj = S.sbs(tr.columns(ranked).values, y, plants, _sbs_train_fn(cfg), cfg.selection.k_folds,
                     ranked, cfg.seed)
        selected = traj.best_subset
        traj.to_csv(ws.path("sbs_trajectory.csv"), ws.meta("select"))
        sbs_doc = {"best_size": traj.best.size, "best_cv_accuracy": traj.best.cv_accuracy,
                   "removal_order": traj.removal_order, "removal_evaluations": traj.removal_evaluations,
                   "fits": traj.fits, "folds": traj.folds}
    else:
        ws.remove("sbs_trajectory.csv")
    ws.write_json("selection.json", "select", {
        "mutual_information": {n: float(s) for n, s in zip(fm.feature_names, scores)},
        "ranked": ranked, "selected": selected, "sbs": sbs_doc,
    })
    log.info("select: %d of %d features", len(selected), len(fm.feature_names))


def _xy(ws: Workspace, windows, fm: F.FeatureMatrix, names, part: str):
    ids = _partition_ids(windows, part)
    return fm.rows(ids).columns(names).values, _labels_for(windows, ids), ids


def stage_train(ws: Workspace) -> None:
    ws.require("train", "features.csv", "windows.csv", "selection.json")
    cfg = ws.cfg
    windows = ws.load_windows()
    fm = ws.load_features()
    names = ws.read_json("selection.json")["selected"]
    Xtr, ytr, _ = _xy(ws, windows, fm, names, "train")
    Xv, yv, _ = _xy(ws, windows, fm, names, "validation")
    params = cfg.train_params()
    if cfg.search_budget > 0:
        result = pipeline_search((Xtr, ytr), (Xv, yv), budget=cfg.search_budget, seed=cfg.seed)
        best_hgb = min((e for e in result.evaluations if e.candidate == "hgb"), key=lambda e: e.sort_key)
        params = TrainParams(**best_hgb.params)
        ws.write_json("search.json", "train", {**result.to_dict(), "chosen_hgb": best_hgb.params})
    else:
        ws.remove("search.json")
    model = train_hgb(Xtr, ytr, Xv, yv, params, names, ("healthy", "stressed"))
    save_model(model, ws.path("model.json"), ws.meta("train"))
    ws.write_json("train_report.json", "train", {
        "params": params.to_dict(), "n_trees": len(model.trees), "best_round": model.history["best_round"],
        "train_accuracy": A.accuracy(model.predict(Xtr), ytr),
        "validation_accuracy": A.accuracy(model.predict(Xv), yv),
        "n_train": int(ytr.size), "n_validation": int(yv.size),
    })
    log.info("train: %d trees", len(model.trees))


def _binary(y: np.ndarray) -> np.ndarray:
    return (y == "stressed").astype(float)


def stage_calibrate(ws: Workspace) -> None:
    ws.require("calibrate", "model.json", "features.csv", "windows.csv")
    windows = ws.load_windows()
    fm = ws.load_features()
    model = load_model(ws.path("model.json"))
    Xv, yv, _ = _xy(ws, windows, fm, model.feature_manifest, "validation")
    rep = C.calibration_report(model.predict_logit(Xv), _binary(yv), ws.cfg.calibration.bins)
    model.temperature = rep.temperature
    save_model(model, ws.path("model_calibrated.json"), ws.meta("calibrate"))
    ws.write_json("calibration_report.json", "calibrate", rep.to_dict())
    rep.write_bins_csv(ws.path("reliability_bins.csv"), ws.meta("calibrate"))
    log.info("calibrate: T=%.4f", rep.temperature)


def stage_eval(ws: Workspace) -> None:
    ws.require("eval", "model_calibrated.json", "features.csv", "windows.csv")
    windows = ws.load_windows()
    fm = ws.load_features()
    model = load_model(ws.path("model_calibrated.json"))
    doc = {}
    for part in ("train", "validation", "test"):
        X, y, _ = _xy(ws, windows, fm, model.feature_manifest, part)
        if y.size == 0:
            doc[part] = None
            continue
        pred = model.predict(X)
        acc = A.accuracy(pred, y)
        confusion = {t: {p: int(np.sum((y == t) & (pred == p))) for p in model.classes} for t in model.classes}
        doc[part] = {"accuracy": acc, "n": int(y.size), "confusion": confusion}
        print(f"{part} accuracy {acc!r} (n={y.size})")
    ws.write_json("eval.json", "eval", {"temperature": model.temperature, "partitions": doc})


def _pr_rows(curve: A.PRCurve):
    return zip(curve.thresholds.tolist(), curve.precision.tolist(), curve.recall.tolist())


def stage_pr(ws: Workspace) -> None:
    ws.require("pr", "model_calibrated.json", "features.csv", "windows.csv")
    cfg = ws.cfg
    windows = ws.load_windows()
    fm = ws.load_features()
    model = load_model(ws.path("model_calibrated.json"))
    summary = {"positive_class": model.positive_class, "target_recall": cfg.analysis.target_recall}
    curves = {}
    for part, name in (("validation", "pr_val.csv"), ("test", "pr_test.csv")):
        X, y, _ = _xy(ws, windows, fm, model.feature_manifest, part)
        if y.size == 0 or len(set(y.tolist())) < 2:
            ws.remove(name)
            summary[part] = None
            continue
        scores = model.predict_proba(X)
        curve = A.pr_curve(scores, y, model.positive_class)
        curves[part] = (scores, y)
        ws.write_rows(name, "pr", ["threshold", "precision", "recall"], _pr_rows(curve))
        p50, r50 = A.precision_recall_at(scores, y, 0.5, model.positive_class)
        summary[part] = {"auprc": A.auprc(curve), "n": int(y.size), "precision_at_0.5": p50, "recall_at_0.5": r50}
        if part == "validation":
            thr, p, r = A.threshold_for_recall(curve, cfg.analysis.target_recall)
            summary["recall_threshold"] = {"threshold": thr, "validation_precision": p, "validation_recall": r}
    if "test" in curves and "recall_threshold" in summary:
        p, r = A.precision_recall_at(*curves["test"], summary["recall_threshold"]["threshold"], model.positive_class)
        summary["recall_threshold"].update({"test_precision": p, "test_recall": r})
    ws.write_json("pr_summary.json", "pr", summary)


def stage_transition(ws: Workspace) -> None:
    ws.require("transition", "model_calibrated.json", "features.csv", "windows.csv", "series.json")
    cfg = ws.cfg
    an = cfg.analysis
    windows = [w for w in ws.load_windows() if w["interval"] == "t2"]
    if not windows:
        raise StageError("no t2 windows to analyse; check t1/t3")
    fm = ws.load_features()
    model = load_model(ws.path("model_calibrated.json"))
    ids = [w["window_id"] for w in windows]
    cert = model.predict_proba(fm.rows(ids).columns(model.feature_manifest).values)
    stamps = np.array([float(w["end"]) for w in windows])
    ws.write_rows("certainties.csv", "transition", ["window_id", "plant_id", "group", "timestamp", "certainty"],
                  ([w["window_id"], w["plant_id"], w["group"], int(w["end"]), float(c)]
                   for w, c in zip(windows, cert)))
    series_doc = ws.read_json("series.json")
    group_map = {p["plant_id"]: p["group"] for p in series_doc["plants"]}
    plants = sorted({w["plant_id"] for w in windows})
    plant_curves, group_curves = {}, {}
    for frac in (an.frac, an.trend_frac):
        curves = {}
        for p in plants:
            idx = [i for i, w in enumerate(windows) if w["plant_id"] == p]
            if len(idx) * frac < 2 or len(idx) < 3:
                log.warning("plant %s: %d t2 points are too few to smooth at frac %s", p, len(idx), frac)
                continue
            curves[p] = A.smooth_t2(stamps[idx], cert[idx], frac, p)
        plant_curves[frac] = curves
        group_curves[frac] = A.group_trend(curves, {p: group_map[p] for p in curves}, an.grid_seconds)

    def curve_rows(table):
        for frac in (an.frac, an.trend_frac):
            for scope, c in sorted(table[frac].items()):
                for t, v in zip(c.timestamps.tolist(), c.values.tolist()):
                    yield scope, frac, int(t) if float(t).is_integer() else t, v

    ws.write_rows("trend_plants.csv", "transition", ["scope", "frac", "timestamp", "value"], curve_rows(plant_curves))
    ws.write_rows("trend_groups.csv", "transition", ["scope", "frac", "timestamp", "value"], curve_rows(group_curves))

    onsets, group_onsets = {}, {}
    if series_doc.get("source") == "synth" and os.path.exists(ws.path("ground_truth.json")):
        gt = ws.read_json("ground_truth.json")
        onsets = {p: v["onset"] for p, v in gt["onsets"].items()}
        group_onsets = gt["group_onsets"]

    def report(curves, truth):
        out = {}
        for scope, c in sorted(curves.items()):
            t = A.detect_transition(c, an.threshold, an.dwell_seconds)
            entry = {"transition": t, "transition_iso": _iso(t), "max_certainty": float(c.values.max())}
            if truth:
                onset = truth.get(scope)
                entry["onset"] = onset
                entry["delay_days"] = (None if t is None or onset is None else (t - onset) / Y.DAY)
            out[scope] = entry
        return out

    ws.write_json("transitions.json", "transition", {
        "threshold": an.threshold, "dwell_seconds": an.dwell_seconds, "frac": an.frac,
        "trend_frac": an.trend_frac, "grid_seconds": an.grid_seconds,
        "groups": report(group_curves[an.frac], group_onsets),
        "plants": report(plant_curves[an.frac], onsets),
        "groups_trend_frac": report(group_curves[an.trend_frac], group_onsets),
    })


RUNNERS = {
    "synth": stage_synth, "ingest": stage_ingest, "window": stage_window, "extract": stage_extract,
    "select": stage_select, "train": stage_train, "calibrate": stage_calibrate, "eval": stage_eval,
    "pr": stage_pr, "transition": stage_transition,
}


def stage_pipeline(ws: Workspace) -> None:
    stages = list(PIPELINE) if ws.cfg.paths.input is None else list(PIPELINE[1:])
    for stage in stages:
        t0 = time.perf_counter()
        RUNNERS[stage](ws)
        log.info("%s finished in %.1f s", stage, time.perf_counter() - t0)


RUNNERS["pipeline"] = stage_pipeline


@contextlib.contextmanager
def workdir_lock(workdir: str):
    os.makedirs(workdir, exist_ok=True)
    fh = open(os.path.join(workdir, LOCK_NAME), "a")
    try:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            raise WorkdirLocked(f"work directory {workdir} is in use by another phytosense run") from None
        yield
        fcntl.flock(fh, fcntl.LOCK_UN)
    finally:
        fh.close()


# --------------------------------------------------------------------------- argument parsing


def _flag_overrides(args: argparse.Namespace, cfg: PipelineConfig) -> PipelineConfig:
    simple = {"seed": "seed", "jobs": "jobs", "horizon": "horizon", "stride": "stride",
              "search_budget": "search_budget", "variance_threshold": "variance_threshold"}
    for flag, attr in simple.items():
        v = getattr(args, flag)
        if v is not None:
            setattr(cfg, attr, v)
    nested = {"workdir": ("paths", "workdir"), "input": ("paths", "input"), "format": ("paths", "format"),
              "frac": ("analysis", "frac"), "trend_frac": ("analysis", "trend_frac"),
              "threshold": ("analysis", "threshold"), "dwell": ("analysis", "dwell_seconds"),
              "recall_target": ("analysis", "target_recall"), "top_k": ("selection", "top_k"),
              "sbs": ("selection", "sbs"), "bins": ("calibration", "bins"),
              "held_out": ("labeling", "held_out")}
    for flag, (section, attr) in nested.items():
        v = getattr(args, flag)
        if v is not None:
            setattr(getattr(cfg, section), attr, v)
    for flag in ("n_trees", "learning_rate", "max_depth", "min_samples_leaf", "l2_lambda", "max_bins",
                 "early_stopping_patience"):
        v = getattr(args, flag)
        if v is not None:
            cfg.train[flag] = v
    for flag in ("days", "plants_per_group"):
        v = getattr(args, f"synth_{flag}")
        if v is not None:
            cfg.synth[flag] = v
    return cfg


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("configuration")
    g.add_argument("--config", help="YAML or JSON pipeline config; flags below override it")
    g.add_argument("--workdir", help="directory holding all stage artifacts")
    g.add_argument("--input", help="sample CSV/NDJSON (default: the synth corpus in the workdir)")
    g.add_argument("--format", choices=("csv", "ndjson"))
    g.add_argument("--seed", type=int, help="global seed for every random stream")
    g.add_argument("--jobs", type=int, help="worker processes for feature extraction")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    g = common.add_argument_group("windowing and labels")
    g.add_argument("--horizon", help=f"look-back horizon, one of {', '.join(I.HORIZONS)}")
    g.add_argument("--stride", type=int, help="window stride in seconds (default: non-overlapping)")
    g.add_argument("--held-out", nargs="+", dest="held_out", metavar="PLANT", help="plants reserved for test")
    g = common.add_argument_group("features and selection")
    g.add_argument("--variance-threshold", type=float, dest="variance_threshold")
    g.add_argument("--top-k", type=int, dest="top_k", help="keep the top-k features by mutual information")
    g.add_argument("--sbs", action=argparse.BooleanOptionalAction, default=None,
                   help="run sequential backward selection after ranking")
    g = common.add_argument_group("training (mirrors TrainParams)")
    g.add_argument("--n-trees", type=int, dest="n_trees")
    g.add_argument("--learning-rate", type=float, dest="learning_rate")
    g.add_argument("--max-depth", type=int, dest="max_depth")
    g.add_argument("--min-samples-leaf", type=int, dest="min_samples_leaf")
    g.add_argument("--l2-lambda", type=float, dest="l2_lambda")
    g.add_argument("--max-bins", type=int, dest="max_bins")
    g.add_argument("--patience", type=int, dest="early_stopping_patience", help="early-stopping rounds")
    g.add_argument("--search-budget", type=int, dest="search_budget",
                   help="configurations per candidate for the pipeline search (0: train with the given params)")
    g = common.add_argument_group("calibration and analysis")
    g.add_argument("--bins", type=int, help="quantile bins for ACE / reliability")
    g.add_argument("--frac", type=float, help="LOWESS fraction for plant curves and transitions (default 0.04)")
    g.add_argument("--trend-frac", type=float, dest="trend_frac", help="LOWESS fraction of the global trend")
    g.add_argument("--threshold", type=float, help="certainty threshold for transitions (default 0.5)")
    g.add_argument("--dwell", type=float, help="seconds the trend must stay above the threshold")
    g.add_argument("--recall-target", type=float, dest="recall_target", help="recall for the PR threshold")
    g = common.add_argument_group("synthetic corpus")
    g.add_argument("--days", type=float, dest="synth_days")
    g.add_argument("--plants-per-group", type=int, dest="synth_plants_per_group")

    parser = argparse.ArgumentParser(prog="phytosense", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=GENERATOR_VERSION)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "synth": "generate the synthetic corpus and its ground truth",
        "ingest": "parse and resample the sample stream",
        "window": "slice windows, assign t1/t2/t3 labels and split",
        "extract": "compute, sanitize and scale window features",
        "select": "rank features by mutual information (and optionally SBS)",
        "train": "fit the gradient-boosted model",
        "calibrate": "fit the temperature on validation windows",
        "eval": "report accuracy per partition",
        "pr": "precision-recall curves and the recall-target threshold",
        "transition": "smooth t2 certainties and detect transitions",
        "pipeline": "run every stage in order",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _fail(exc: Exception, kind: str, code: int, extra: dict | None = None) -> int:
    doc = {"error": kind, "message": str(exc), "exit_code": code, **(extra or {})}
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _flag_overrides(args, load_config(args.config)).validate()
    except ConfigError as exc:
        return _fail(exc, "config_error", 1)
    try:
        with workdir_lock(cfg.paths.workdir):
            RUNNERS[args.command](Workspace(cfg))
    except StageError as exc:
        return _fail(exc, exc.kind, exc.exit_code, exc.payload())
    except (I.IngestError, ValueError, KeyError, RuntimeError, OSError) as exc:
        return _fail(exc, type(exc).__name__, 3, {"command": args.command})
    return 0


if __name__ == "__main__":
    sys.exit(main())
