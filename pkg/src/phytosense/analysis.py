"""Certainty smoothing, transition detection, PR analytics and accuracy."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

GRID_SECONDS = 300


# --------------------------------------------------------------------------- LOWESS


def lowess(xs, ys, frac: float) -> np.ndarray:
    """Locally weighted linear smoother (tricube weights, no robustness passes).

    For each ``x_i`` the ``ceil(frac * n)`` nearest points (ties: the left
    one) get weights ``(1 - (d / d_max)^3)^3`` and a weighted least-squares
    line is evaluated at ``x_i``.  If every neighbour sits at ``x_i``, or the
    weighted fit is degenerate, the weighted mean is used instead.
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    n = x.size
    if y.shape != x.shape:
        raise ValueError("xs and ys differ in length")
    if n < 3:
        raise ValueError("lowess needs at least 3 points")
    if np.any(np.diff(x) < 0):
        raise ValueError("xs must be ascending")
    r = int(math.ceil(frac * n - 1e-9))
    if not 0 < frac <= 1 or r < 2:
        raise ValueError("need 0 < frac <= 1 and frac * n >= 2")
    out = np.empty(n)
    lo = 0
    for i in range(n):
        # slide the r-point window while the right candidate is strictly closer
        while lo + r < n and x[i] - x[lo] > x[lo + r] - x[i]:
            lo += 1
        xw, yw = x[lo:lo + r], y[lo:lo + r]
        d = np.abs(xw - x[i])
        dmax = d.max()
        if dmax == 0:
            out[i] = yw.mean()
            continue
        w = (1.0 - (d / dmax) ** 3) ** 3
        sw = w.sum()
        mx = (w @ xw) / sw
        my = (w @ yw) / sw
        dx = xw - mx
        sxx = w @ (dx * dx)
        if sxx <= 1e-12 * max(1.0, dmax * dmax) * sw:
            out[i] = my
            continue
        slope = (w @ (dx * (yw - my))) / sxx
        out[i] = my + slope * (x[i] - mx)
    return out


@dataclass
class TrendCurve:
    timestamps: np.ndarray
    values: np.ndarray
    frac: float
    scope: str

    def __post_init__(self) -> None:
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestamps.shape != self.values.shape:
            raise ValueError("timestamps and values differ in length")
        if np.any(np.diff(self.timestamps) < 0):
            raise ValueError("trend timestamps must be ascending")


def smooth_t2(timestamps, certainties, frac: float, scope: str = "") -> TrendCurve:
    """LOWESS trend of interval-t2 certainties, clipped to [0, 1]."""
    t = np.asarray(timestamps, dtype=np.float64)
    c = np.asarray(certainties, dtype=np.float64)
    if t.size == 0:
        raise ValueError(f"no t2 certainties to smooth{' for ' + scope if scope else ''}")
    order = np.argsort(t, kind="stable")
    t, c = t[order], c[order]
    return TrendCurve(t, np.clip(lowess(t, c, frac), 0.0, 1.0), frac, scope)


def _nearest(curve: TrendCurve, grid: np.ndarray) -> np.ndarray:
    t = curve.timestamps
    pos = np.clip(np.searchsorted(t, grid, side="left"), 1, t.size - 1) if t.size > 1 else np.zeros(grid.size, int)
    if t.size == 1:
        return np.full(grid.size, curve.values[0])
    left_closer = (grid - t[pos - 1]) <= (t[pos] - grid)
    return curve.values[np.where(left_closer, pos - 1, pos)]


def group_trend(curves: Mapping[str, TrendCurve], group_map: Mapping[str, str],
                grid_seconds: int = GRID_SECONDS) -> dict[str, TrendCurve]:
    """Pointwise mean of plant curves per group on a common grid.

    Each plant curve is sampled at the grid points (multiples of
    ``grid_seconds``) covered by every member curve, taking its nearest
    point (ties: the earlier one).
    """
    members: dict[str, list[str]] = {}
    for plant in sorted(curves):
        g = group_map.get(plant)
        if g is None:
            warnings.warn(f"plant {plant} has no group; skipped", stacklevel=2)
            continue
        members.setdefault(g, []).append(plant)
    for g in sorted(set(group_map.values()) - set(members)):
        warnings.warn(f"group {g} has no curves; skipped", stacklevel=2)
    out = {}
    for g in sorted(members):
        cs = [curves[p] for p in members[g]]
        start = max(c.timestamps[0] for c in cs)
        stop = min(c.timestamps[-1] for c in cs)
        grid = np.arange(math.ceil(start / grid_seconds), math.floor(stop / grid_seconds) + 1) * float(grid_seconds)
        if grid.size == 0:
            warnings.warn(f"group {g}: member curves do not overlap; skipped", stacklevel=2)
            continue
        vals = np.mean([_nearest(c, grid) for c in cs], axis=0)
        out[g] = TrendCurve(grid, np.clip(vals, 0.0, 1.0), cs[0].frac, g)
    return out


def detect_transition(curve: TrendCurve, threshold: float = 0.5, dwell: float = 0.0) -> float | None:
    """First time the curve reaches ``threshold`` and stays there ``dwell`` seconds.

    A run of consecutive points at or above the threshold qualifies when its
    last point is at least ``dwell`` seconds after its first.
    """
    if curve.timestamps.size == 0:
        raise ValueError("empty curve")
    above = curve.values >= threshold
    t = curve.timestamps
    i, n = 0, t.size
    while i < n:
        if not above[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and above[j + 1]:
            j += 1
        if t[j] - t[i] >= dwell:
            return float(t[i])
        i = j + 1
    return None


# --------------------------------------------------------------------------- precision-recall


@dataclass
class PRCurve:
    """Points in ascending threshold order; the last one is the +inf sentinel."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    positive_class: str = "stressed"

    def to_csv(self, path, meta: dict | None = None) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            if meta is not None:
                fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
            fh.write("threshold,precision,recall\n")
            for t, p, r in zip(self.thresholds, self.precision, self.recall):
                fh.write(f"{float(t)!r},{float(p)!r},{float(r)!r}\n")


def _binary(labels, positive_class) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.dtype.kind in "biuf" and not isinstance(positive_class, str):
        return labels == positive_class
    return labels.astype(str) == str(positive_class)


def pr_curve(scores, labels, positive_class="stressed") -> PRCurve:
    """Precision/recall when predicting positive for ``score >= threshold``."""
    s = np.asarray(scores, dtype=np.float64)
    pos = _binary(labels, positive_class)
    if s.shape != pos.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(pos.sum())
    if n_pos == 0 or n_pos == pos.size:
        raise ValueError("both classes must be present")
    order = np.argsort(-s, kind="stable")
    s_sorted, pos_sorted = s[order], pos[order]
    tp = np.cumsum(pos_sorted)
    fp = np.cumsum(~pos_sorted)
    # last index of each distinct score in descending order
    last = np.flatnonzero(np.append(s_sorted[1:] != s_sorted[:-1], True))
    thr = s_sorted[last]
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / n_pos
    return PRCurve(np.append(thr[::-1], np.inf), np.append(precision[::-1], 1.0),
                   np.append(recall[::-1], 0.0), str(positive_class))


def auprc(curve: PRCurve) -> float:
    """Step-wise average precision: sum of (R_k - R_{k-1}) * P_k."""
    r = curve.recall[::-1]
    p = curve.precision[::-1]
    return float(np.sum(np.diff(r) * p[1:]))


def threshold_for_recall(curve: PRCurve, target: float) -> tuple[float, float, float]:
    """Highest-precision point with recall >= target (ties: highest threshold)."""
    if not 0 < target <= 1:
        raise ValueError("target recall must lie in (0, 1]")
    ok = np.flatnonzero(curve.recall >= target)
    if ok.size == 0:
        warnings.warn(f"no threshold reaches recall {target}; returning the lowest threshold", stacklevel=2)
        k = 0
    else:
        best = curve.precision[ok].max()
        k = int(ok[curve.precision[ok] == best].max())
    return float(curve.thresholds[k]), float(curve.precision[k]), float(curve.recall[k])


def precision_recall_at(scores, labels, threshold: float, positive_class="stressed") -> tuple[float, float]:
    s = np.asarray(scores, dtype=np.float64)
    pos = _binary(labels, positive_class)
    pred = s >= threshold
    tp = int(np.sum(pred & pos))
    n_pred = int(pred.sum())
    return (tp / n_pred if n_pred else 1.0), tp / int(pos.sum())


def accuracy(predicted: Sequence, truth: Sequence) -> float:
    p, t = np.asarray(predicted), np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError("predicted and true labels differ in length")
    if p.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(p == t))
