"""Deterministic synthetic EDP corpus for dataset-free runs of the pipeline.

Each plant's signal is

    edp(t) = offset + A * sin(2*pi*(hour - 6) / 24)
             + e(t) * (1 + s(t) * env(t)) + drift * days_since_onset(t)

with ``e`` an AR(1) process whose scale differs between plants
(log-normal, ``noise_plant_spread``) and wanders slowly within a plant
(AR(1) on 10-minute knots in log scale, ``noise_wander``).  After the group's onset the stress level
``s(t) = step_gain + gain_per_day * days_since_onset`` amplifies the
fluctuations, fully at midday and by ``night_fraction`` at night
(``env = night_fraction + (1 - night_fraction) * daylight``), and the
baseline starts drifting.  Plants of groups without an onset never change.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import lfilter

from .ingest import GROUPS, SignalSeries, parse_time
from .rng import substream

DAY = 86400.0


def _default_onsets() -> dict:
    return {"saturated": 7.0, "ml200": 5.0, "ml100": 5.0}


@dataclass
class SynthConfig:
    plants_per_group: int = 4
    days: float = 18
    sample_rate: float = 1.0
    start: str = "2025-06-04T00:00:00Z"
    offset_spread_mv: float = 5.0
    circadian_amplitude_mv: float = 5.0
    amplitude_spread: float = 0.2
    ar_coefficient: float = 0.95
    noise_sigma_mv: float = 0.3
    noise_plant_spread: float = 0.15
    noise_wander: float = 0.15
    onset_days: dict = field(default_factory=_default_onsets)
    stress_step_gain: float = 1.0
    stress_gain_per_day: float = 0.05
    night_fraction: float = 0.35
    drift_mv_per_day: float = 0.2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.days < 2:
            raise ValueError("days must be >= 2")
        if self.plants_per_group < 1:
            raise ValueError("plants_per_group must be >= 1")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not 0.0 <= self.ar_coefficient < 1.0:
            raise ValueError("ar_coefficient must lie in [0, 1)")
        for name in ("offset_spread_mv", "circadian_amplitude_mv", "amplitude_spread", "noise_sigma_mv",
                     "stress_step_gain", "stress_gain_per_day", "drift_mv_per_day", "noise_plant_spread",
                     "noise_wander"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.night_fraction <= 1.0:
            raise ValueError("night_fraction must lie in [0, 1]")
        unknown = set(self.onset_days) - set(GROUPS)
        if unknown:
            raise ValueError(f"onset_days names unknown group(s): {sorted(unknown)}")

    @property
    def start_epoch(self) -> float:
        return parse_time(self.start)

    def to_dict(self) -> dict:
        return asdict(self)


def plant_ids(cfg: SynthConfig) -> list[tuple[str, str]]:
    """``(plant_id, group)`` pairs, numbered P01.. in group order."""
    out = []
    for g in GROUPS:
        for _ in range(cfg.plants_per_group):
            out.append((f"P{len(out) + 1:02d}", g))
    return out


def _ar1(rng: np.random.Generator, n: int, phi: float, sigma: float) -> np.ndarray:
    eps = rng.standard_normal(n) * sigma
    if phi == 0.0:
        return eps
    y_prev = rng.standard_normal() * sigma / np.sqrt(1.0 - phi * phi)
    out, _ = lfilter([1.0], [1.0, -phi], eps, zi=[phi * y_prev])
    return out


WANDER_STEP = 600.0


def _wander(rng: np.random.Generator, rel: np.ndarray, phi: float = 0.5) -> np.ndarray:
    """Unit-variance AR(1) on 10-minute knots, linearly interpolated."""
    knots = np.arange(0.0, rel[-1] + 2 * WANDER_STEP, WANDER_STEP) if rel.size else np.zeros(1)
    w = _ar1(rng, knots.size, phi, np.sqrt(1.0 - phi * phi))
    return np.interp(rel, knots, w)


def generate(cfg: SynthConfig | None = None) -> tuple[list[SignalSeries], dict[str, float | None]]:
    """Series for every plant plus each plant's stress onset (epoch s, or None)."""
    cfg = cfg or SynthConfig()
    n = int(round(cfg.days * DAY * cfg.sample_rate))
    t0 = cfg.start_epoch
    rel = np.arange(n) / cfg.sample_rate
    ts = t0 + rel
    hour = (rel % DAY) / 3600.0
    phase = np.sin(2 * np.pi * (hour - 6.0) / 24.0)
    daylight = np.maximum(phase, 0.0)
    env = cfg.night_fraction + (1.0 - cfg.night_fraction) * daylight
    series, onsets = [], {}
    for k, (pid, group) in enumerate(plant_ids(cfg)):
        rng = substream(cfg.seed, "synth", k)
        offset = rng.normal(0.0, cfg.offset_spread_mv)
        amp = cfg.circadian_amplitude_mv * (1.0 + cfg.amplitude_spread * rng.uniform(-1.0, 1.0))
        sigma = cfg.noise_sigma_mv * np.exp(cfg.noise_plant_spread * rng.standard_normal())
        noise = _ar1(rng, n, cfg.ar_coefficient, sigma)
        noise *= np.exp(cfg.noise_wander * _wander(rng, rel))
        edp = offset + amp * phase
        onset_day = cfg.onset_days.get(group)
        if onset_day is None:
            edp = edp + noise
            onsets[pid] = None
        else:
            since = np.maximum(rel / DAY - onset_day, 0.0)
            active = rel / DAY >= onset_day
            level = np.where(active, cfg.stress_step_gain + cfg.stress_gain_per_day * since, 0.0)
            edp = edp + noise * (1.0 + level * env) + cfg.drift_mv_per_day * since
            onsets[pid] = t0 + onset_day * DAY
        series.append(SignalSeries(pid, group, ts.copy(), edp))
    return series, onsets


def ground_truth(cfg: SynthConfig, onsets: dict[str, float | None]) -> dict:
    groups = dict(plant_ids(cfg))
    return {
        "config": cfg.to_dict(),
        "onsets": {p: {"group": groups[p], "onset": onsets[p]} for p in sorted(onsets)},
        "group_onsets": {g: (None if cfg.onset_days.get(g) is None else cfg.start_epoch + cfg.onset_days[g] * DAY)
                         for g in GROUPS},
    }


def write_ground_truth(path, cfg: SynthConfig, onsets: dict[str, float | None], meta: dict | None = None) -> None:
    doc = ground_truth(cfg, onsets)
    if meta:
        doc.update(meta)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")
