"""Temperature scaling and calibration metrics (NLL, Brier, ACE, reliability bins)."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

PROBA_CLAMP = 1e-12
T_BOUNDS = (0.05, 20.0)
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _arrays(probas, labels):
    p = np.asarray(probas, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.shape != y.shape:
        raise ValueError("probas and labels differ in length")
    return p, y


def nll(probas, labels) -> float:
    p, y = _arrays(probas, labels)
    p = np.clip(p, PROBA_CLAMP, 1.0 - PROBA_CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def brier(probas, labels) -> float:
    p, y = _arrays(probas, labels)
    return float(np.mean((y - p) ** 2))


def quantile_bins(probas, M: int = 20) -> list[np.ndarray]:
    """Indices of ``M`` contiguous bins over the probability-sorted samples.

    Bin sizes are ``ceil(N/M)`` for the first ``N mod M`` bins and
    ``floor(N/M)`` for the rest; equal probabilities keep input order.
    """
    p = np.asarray(probas, dtype=np.float64).ravel()
    if M < 1:
        raise ValueError("M must be >= 1")
    if p.size < M:
        raise ValueError(f"{p.size} samples cannot fill {M} bins; use a smaller M")
    order = np.argsort(p, kind="stable")
    return np.array_split(order, M)


def reliability_bins(probas, labels, M: int = 20) -> list[tuple[float, float, int]]:
    """``(mean confidence, empirical frequency, count)`` per quantile bin."""
    p, y = _arrays(probas, labels)
    return [(float(p[b].mean()), float(y[b].mean()), int(b.size)) for b in quantile_bins(p, M)]


def ace(probas, labels, M: int = 20) -> float:
    """Adaptive calibration error: mean |accuracy - confidence| over quantile bins."""
    rows = reliability_bins(probas, labels, M)
    return float(np.mean([abs(freq - conf) for conf, freq, _ in rows]))


def predicted_positive(logits, temperature: float = 1.0) -> np.ndarray:
    """Decision rule ``z / T >= 0``.

    Taken on the logit sign rather than ``sigmoid(z / T) >= 0.5``: a logit a
    hair below zero rounds to exactly 0.5, and the sign never depends on T.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    return np.asarray(logits, dtype=np.float64) / temperature >= 0.0


def _nll_at(logits: np.ndarray, y: np.ndarray, t: float) -> float:
    return nll(expit(logits / t), y)


def fit_temperature(logits, labels, tol: float = 1e-4) -> float:
    """Temperature minimising validation NLL of ``sigmoid(z / T)``.

    Golden-section search over ``ln T`` in ``[ln 0.05, ln 20]``; the result
    is never worse than ``T = 1``.
    """
    z, y = _arrays(logits, labels)
    if z.size < 2:
        raise ValueError("need at least 2 samples")
    if y.min() == y.max():
        raise ValueError("both classes must be present")
    if np.all(z == z[0]):
        warnings.warn("all logits are identical; temperature left at 1", stacklevel=2)
        return 1.0
    a, b = math.log(T_BOUNDS[0]), math.log(T_BOUNDS[1])
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = _nll_at(z, y, math.exp(c)), _nll_at(z, y, math.exp(d))
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = _nll_at(z, y, math.exp(c))
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = _nll_at(z, y, math.exp(d))
    t = math.exp((a + b) / 2.0)
    if _nll_at(z, y, t) > _nll_at(z, y, 1.0):
        return 1.0
    return t


@dataclass
class CalibrationReport:
    temperature: float
    n: int
    accuracy_before: float
    accuracy_after: float
    nll_before: float
    nll_after: float
    brier_before: float
    brier_after: float
    ace_before: float
    ace_after: float
    bins_before: list = field(default_factory=list)
    bins_after: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bins_before"] = [list(r) for r in self.bins_before]
        d["bins_after"] = [list(r) for r in self.bins_after]
        return d

    def write_bins_csv(self, path, meta: dict | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            if meta is not None:
                fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
            fh.write("stage,bin,mean_confidence,empirical_frequency,count\n")
            for stage, rows in (("uncalibrated", self.bins_before), ("calibrated", self.bins_after)):
                for i, (conf, freq, cnt) in enumerate(rows):
                    fh.write(f"{stage},{i},{conf!r},{freq!r},{cnt}\n")


def calibration_report(logits, labels, M: int = 20, temperature: float | None = None) -> CalibrationReport:
    """Fit (or apply a given) temperature and compare metrics before/after."""
    z, y = _arrays(logits, labels)
    t = fit_temperature(z, y) if temperature is None else float(temperature)
    before, after = expit(z), expit(z / t)
    m = min(M, z.size)
    return CalibrationReport(
        temperature=t,
        n=int(z.size),
        accuracy_before=float(np.mean(predicted_positive(z) == (y == 1))),
        accuracy_after=float(np.mean(predicted_positive(z, t) == (y == 1))),
        nll_before=nll(before, y), nll_after=nll(after, y),
        brier_before=brier(before, y), brier_after=brier(after, y),
        ace_before=ace(before, y, m), ace_after=ace(after, y, m),
        bins_before=reliability_bins(before, y, m), bins_after=reliability_bins(after, y, m),
    )
