"""Pipeline configuration: a YAML or JSON document plus command-line overrides."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field, fields
from typing import Any, Mapping

import yaml

from .ingest import DEFAULT_CLASS_MAPS, GROUPS, HORIZONS, parse_time
from .model.hgb import TrainParams
from .synth import SynthConfig

DEFAULT_HELD_OUT = ("P04", "P05", "P06", "P07", "P08", "P16")


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    input: str | None = None
    workdir: str = "work"
    format: str = "csv"


@dataclass
class Labeling:
    scheme: str = "binary"
    # [start, end) as ISO strings or epoch seconds; None derives them from the
    # first / last `interval_days` of the recording
    t1: list | None = None
    t3: list | None = None
    interval_days: float = 3.0
    class_map: dict | None = None
    held_out: list = field(default_factory=lambda: list(DEFAULT_HELD_OUT))
    train_ratio: float = 0.8


@dataclass
class Selection:
    top_k: int = 200
    sbs: bool = False
    k_folds: int = 5
    sbs_n_trees: int = 30
    sbs_max_depth: int = 3


@dataclass
class Calibration:
    bins: int = 20


@dataclass
class Analysis:
    frac: float = 0.04          # plant curves and transition detection
    trend_frac: float = 0.5     # slowly varying global trend
    threshold: float = 0.5
    dwell_seconds: float = 0.0
    target_recall: float = 0.95
    grid_seconds: int = 300


@dataclass
class PipelineConfig:
    seed: int = 0
    jobs: int = 1
    horizon: str = "30min"
    stride: int | None = None
    variance_threshold: float = 0.01
    search_budget: int = 0
    paths: Paths = field(default_factory=Paths)
    labeling: Labeling = field(default_factory=Labeling)
    selection: Selection = field(default_factory=Selection)
    train: dict = field(default_factory=dict)
    calibration: Calibration = field(default_factory=Calibration)
    analysis: Analysis = field(default_factory=Analysis)
    synth: dict = field(default_factory=dict)

    # ------------------------------------------------------------------ views

    def train_params(self) -> TrainParams:
        return TrainParams(**{**self.train, "seed": self.seed})

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**{**self.synth, "seed": self.synth.get("seed", self.seed)})

    def class_map(self) -> dict:
        return dict(DEFAULT_CLASS_MAPS[self.labeling.scheme] if self.labeling.class_map is None
                    else self.labeling.class_map)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = {g.name: copy.deepcopy(getattr(v, g.name)) for g in fields(v)} if hasattr(
                v, "__dataclass_fields__") else copy.deepcopy(v)
        return out

    # ------------------------------------------------------------------ checks

    def validate(self) -> "PipelineConfig":
        problems = []
        if self.horizon not in HORIZONS:
            problems.append(f"horizon {self.horizon!r} not in {', '.join(HORIZONS)}")
        if self.stride is not None and int(self.stride) < 1:
            problems.append("stride must be >= 1 second")
        if self.jobs < 1:
            problems.append("jobs must be >= 1")
        if self.search_budget < 0:
            problems.append("search_budget must be >= 0")
        if self.variance_threshold < 0:
            problems.append("variance_threshold must be >= 0")
        if self.paths.format not in ("csv", "ndjson"):
            problems.append("paths.format must be csv or ndjson")
        if self.paths.input is not None and os.path.abspath(self.paths.input) == os.path.abspath(self.paths.workdir):
            problems.append("paths.input and paths.workdir must differ")
        lab = self.labeling
        if lab.scheme != "binary":
            problems.append(f"scheme {lab.scheme!r}: the command line pipeline is binary; "
                            "use phytosense.model.train_ovr for multiclass")
        for name in ("t1", "t3"):
            r = getattr(lab, name)
            if r is None:
                continue
            try:
                a, b = (parse_time(x) for x in r)
            except (TypeError, ValueError) as exc:
                problems.append(f"labeling.{name}: expected [start, end] ({exc})")
                continue
            if not b > a:
                problems.append(f"labeling.{name} is empty")
        if lab.interval_days <= 0:
            problems.append("labeling.interval_days must be positive")
        if not 0 < lab.train_ratio < 1:
            problems.append("labeling.train_ratio must lie in (0, 1)")
        if lab.class_map is not None:
            bad = [g for g in lab.class_map if g not in GROUPS]
            if bad:
                problems.append(f"labeling.class_map names unknown group(s) {bad}")
        sel = self.selection
        if sel.top_k < 1 or sel.k_folds < 2 or sel.sbs_n_trees < 1 or sel.sbs_max_depth < 1:
            problems.append("selection: top_k >= 1, k_folds >= 2, sbs_n_trees >= 1, sbs_max_depth >= 1")
        if self.calibration.bins < 1:
            problems.append("calibration.bins must be >= 1")
        an = self.analysis
        for name in ("frac", "trend_frac"):
            if not 0 < getattr(an, name) <= 1:
                problems.append(f"analysis.{name} must lie in (0, 1]")
        if not 0 < an.target_recall <= 1:
            problems.append("analysis.target_recall must lie in (0, 1]")
        if an.dwell_seconds < 0 or an.grid_seconds < 1:
            problems.append("analysis: dwell_seconds >= 0 and grid_seconds >= 1")
        for label, build in (("train", self.train_params), ("synth", self.synth_config)):
            try:
                build()
            except (TypeError, ValueError) as exc:
                problems.append(f"{label}: {exc}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


_SECTIONS = {"paths": Paths, "labeling": Labeling, "selection": Selection,
             "calibration": Calibration, "analysis": Analysis}


def from_mapping(doc: Mapping[str, Any] | None) -> PipelineConfig:
    doc = dict(doc or {})
    known = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            if value is None:
                continue
            if not isinstance(value, Mapping):
                raise ConfigError(f"{key} must be a mapping")
            cls = _SECTIONS[key]
            names = {f.name for f in fields(cls)}
            bad = sorted(set(value) - names)
            if bad:
                raise ConfigError(f"unknown key(s) in {key}: {', '.join(bad)}")
            kwargs[key] = cls(**value)
        elif key in ("train", "synth"):
            if value is not None and not isinstance(value, Mapping):
                raise ConfigError(f"{key} must be a mapping")
            kwargs[key] = dict(value or {})
        else:
            kwargs[key] = value
    try:
        return PipelineConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | os.PathLike | None) -> PipelineConfig:
    """Read a YAML (or JSON, which YAML accepts) config; ``None`` gives defaults."""
    if path is None:
        return PipelineConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from None
    if doc is not None and not isinstance(doc, Mapping):
        raise ConfigError(f"config {path} must contain a mapping at top level")
    return from_mapping(doc)


def dumps(cfg: PipelineConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=1)
