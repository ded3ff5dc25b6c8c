"""Statistical window features, sanitizing, variance filter and scaling.

The extractors operate on 2-D arrays (one window per row) so a whole horizon
is processed with row-wise numpy reductions; ``extract_features`` is the
single-window entry point over the same code.  Undefined values (zero
variance, lag beyond the window, ...) come out as NaN and are replaced later
by ``sanitize``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

CATALOG_VERSION = "phytosense-catalog/1"
RELATIVE_EPS = 1e-10
CENTROID_EPS = 1e-12


@dataclass(frozen=True)
class Feature:
    name: str
    extractor: str
    params: tuple = ()


def _q(p):
    return lambda x: np.quantile(x, p, axis=1, method="linear")


def _centered(x):
    return x - x.mean(axis=1, keepdims=True)


def _var(x):
    return np.mean(_centered(x) ** 2, axis=1)


def _flat(m2, x):
    """Variance at rounding level relative to the window's magnitude counts as zero."""
    return m2 <= (RELATIVE_EPS * np.abs(x).max(axis=1)) ** 2


def _moment_ratio(x, order):
    c = _centered(x)
    m2 = np.mean(c**2, axis=1)
    mk = np.mean(c**order, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = mk / m2 ** (order / 2)
    return np.where(_flat(m2, x), np.nan, out)


def _kurtosis(x):
    return _moment_ratio(x, 4) - 3.0


def _mean_crossings(x):
    above = x > x.mean(axis=1, keepdims=True)
    return np.count_nonzero(above[:, 1:] != above[:, :-1], axis=1).astype(float)


def _longest_run(mask):
    """Longest run of True per row."""
    n = mask.shape[1]
    idx = np.arange(1, n + 1)
    # position of the most recent False at or before each column
    last_false = np.maximum.accumulate(np.where(mask, 0, idx), axis=1)
    return (idx - last_false).max(axis=1).astype(float) if n else np.zeros(mask.shape[0])


def _strike_above(x):
    return _longest_run(x > x.mean(axis=1, keepdims=True))


def _strike_below(x):
    return _longest_run(x < x.mean(axis=1, keepdims=True))


def _number_peaks(support):
    def f(x):
        n = x.shape[1]
        if n < 2 * support + 1:
            return np.zeros(x.shape[0])
        core = x[:, support:n - support]
        is_peak = np.ones_like(core, dtype=bool)
        for k in range(1, support + 1):
            is_peak &= core > x[:, support - k:n - support - k]
            is_peak &= core > x[:, support + k:n - support + k]
        return is_peak.sum(axis=1).astype(float)
    return f


def _autocorrelation(lag):
    def f(x):
        n = x.shape[1]
        if lag >= n:
            return np.full(x.shape[0], np.nan)
        c = _centered(x)
        var = np.mean(c**2, axis=1)
        num = np.sum(c[:, :-lag] * c[:, lag:], axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = num / ((n - lag) * var)
        return np.where(_flat(var, x), np.nan, out)
    return f


def _trend(x):
    n = x.shape[1]
    t = np.arange(n, dtype=float)
    tc = t - t.mean()
    stt = np.sum(tc**2)
    c = _centered(x)
    slope = np.sum(c * tc, axis=1) / stt   # row-wise sums keep results independent of batch size
    intercept = x.mean(axis=1) - slope * t.mean()
    syy = np.sum(c**2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = slope**2 * stt / syy
    return slope, intercept, np.where(_flat(syy / n, x), np.nan, r2)


def _slope(x):
    return _trend(x)[0]


def _intercept(x):
    return _trend(x)[1]


def _r_squared(x):
    return _trend(x)[2]


def _cid_ce(x):
    return np.sqrt(np.sum(np.diff(x, axis=1) ** 2, axis=1))


def _binned_entropy(bins):
    def f(x):
        lo = x.min(axis=1, keepdims=True)
        hi = x.max(axis=1, keepdims=True)
        width = (hi - lo) / bins
        idx = np.zeros(x.shape, dtype=np.int64)
        for k in range(1, bins):
            idx += x >= lo + k * width
        rows = np.arange(x.shape[0])[:, None] * bins
        counts = np.bincount((rows + idx).ravel(), minlength=x.shape[0] * bins).reshape(-1, bins)
        p = counts / x.shape[1]
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, p * np.log(p), 0.0)
        return 0.0 - terms.sum(axis=1)
    return f


def _permutation_entropy(order):
    def f(x):
        n = x.shape[1]
        if n < order:
            return np.full(x.shape[0], np.nan)
        emb = np.stack([x[:, i:n - order + 1 + i] for i in range(order)], axis=2)
        # rank of each element within its pattern; ties resolved by position
        ranks = np.zeros(emb.shape, dtype=np.int64)
        for i in range(order):
            for j in range(order):
                if i != j:
                    before = emb[..., j] < emb[..., i]
                    if j < i:
                        before |= emb[..., j] == emb[..., i]
                    ranks[..., i] += before
        code = np.zeros(emb.shape[:2], dtype=np.int64)
        for i in range(order):
            code = code * order + ranks[..., i]
        width = order**order
        rows = np.arange(x.shape[0])[:, None] * width
        counts = np.bincount((rows + code).ravel(), minlength=x.shape[0] * width).reshape(-1, width)
        p = counts / code.shape[1]
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(p > 0, p * np.log(p), 0.0)
        return 0.0 - terms.sum(axis=1)
    return f


def _fft_abs(k):
    def f(x):
        if k > x.shape[1] // 2:
            return np.full(x.shape[0], np.nan)
        return np.abs(np.fft.rfft(x, axis=1)[:, k])
    return f


def _spectral_centroid(x):
    n = x.shape[1]
    mag = np.abs(np.fft.rfft(x, axis=1))[:, 1:]
    freqs = np.arange(1, mag.shape[1] + 1) / n
    total = mag.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.sum(mag * freqs, axis=1) / total
    # an AC spectrum at rounding level (constant window) has no centroid
    return np.where(total > CENTROID_EPS * np.abs(x).sum(axis=1), out, np.nan)


EXTRACTORS: dict[str, Callable[..., Callable[[np.ndarray], np.ndarray]]] = {
    "mean": lambda: lambda x: x.mean(axis=1),
    "median": lambda: lambda x: np.median(x, axis=1),
    "minimum": lambda: lambda x: x.min(axis=1),
    "maximum": lambda: lambda x: x.max(axis=1),
    "quantile": _q,
    "variance": lambda: _var,
    "standard_deviation": lambda: lambda x: np.sqrt(_var(x)),
    "iqr": lambda: lambda x: np.diff(np.quantile(x, [0.25, 0.75], axis=1, method="linear"), axis=0)[0],
    "mean_abs_deviation": lambda: lambda x: np.mean(np.abs(_centered(x)), axis=1),
    "root_mean_square": lambda: lambda x: np.sqrt(np.mean(x**2, axis=1)),
    "skewness": lambda: lambda x: _moment_ratio(x, 3),
    "kurtosis": lambda: _kurtosis,
    "abs_energy": lambda: lambda x: np.sum(x**2, axis=1),
    "absolute_sum_of_changes": lambda: lambda x: np.sum(np.abs(np.diff(x, axis=1)), axis=1),
    "mean_abs_change": lambda: lambda x: np.mean(np.abs(np.diff(x, axis=1)), axis=1),
    "mean_second_derivative_central": lambda: lambda x: (
        np.mean(x[:, 2:] - 2 * x[:, 1:-1] + x[:, :-2], axis=1) / 2 if x.shape[1] > 2
        else np.full(x.shape[0], np.nan)),
    "number_crossing_mean": lambda: _mean_crossings,
    "number_peaks": _number_peaks,
    "longest_strike_above_mean": lambda: _strike_above,
    "longest_strike_below_mean": lambda: _strike_below,
    "autocorrelation": _autocorrelation,
    "linear_trend_slope": lambda: _slope,
    "linear_trend_intercept": lambda: _intercept,
    "linear_trend_r2": lambda: _r_squared,
    "cid_ce": lambda: _cid_ce,
    "binned_entropy": _binned_entropy,
    "permutation_entropy": _permutation_entropy,
    "fft_abs": _fft_abs,
    "spectral_centroid": lambda: _spectral_centroid,
}


def _catalog() -> tuple[Feature, ...]:
    f = [Feature(n, n) for n in ("mean", "median", "minimum", "maximum")]
    f += [Feature(f"quantile_{p:g}", "quantile", (p,)) for p in (0.1, 0.25, 0.75, 0.9)]
    f += [Feature(n, n) for n in ("variance", "standard_deviation", "iqr", "mean_abs_deviation",
                                   "root_mean_square", "skewness", "kurtosis", "abs_energy",
                                   "absolute_sum_of_changes", "mean_abs_change",
                                   "mean_second_derivative_central", "number_crossing_mean")]
    f.append(Feature("number_peaks_3", "number_peaks", (3,)))
    f += [Feature(n, n) for n in ("longest_strike_above_mean", "longest_strike_below_mean")]
    f += [Feature(f"autocorrelation_lag_{k}", "autocorrelation", (k,)) for k in (1, 5, 10, 30)]
    f += [Feature(n, n) for n in ("linear_trend_slope", "linear_trend_intercept", "linear_trend_r2",
                                   "cid_ce")]
    f.append(Feature("binned_entropy_10", "binned_entropy", (10,)))
    f.append(Feature("permutation_entropy_3", "permutation_entropy", (3,)))
    f += [Feature(f"fft_abs_{k}", "fft_abs", (k,)) for k in range(1, 6)]
    f.append(Feature("spectral_centroid", "spectral_centroid"))
    return tuple(f)


CATALOG: tuple[Feature, ...] = _catalog()
FEATURE_NAMES: tuple[str, ...] = tuple(f.name for f in CATALOG)
assert len(set(FEATURE_NAMES)) == len(FEATURE_NAMES)


def extract_matrix(windows: np.ndarray, catalog: Sequence[Feature] = CATALOG,
                   chunk_rows: int = 512) -> np.ndarray:
    """Feature matrix for equal-length windows stacked as rows."""
    x = np.atleast_2d(np.asarray(windows, dtype=np.float64))
    if x.shape[1] < 2:
        raise ValueError("windows need at least 2 samples")
    funcs = [EXTRACTORS[f.extractor](*f.params) for f in catalog]
    out = np.empty((x.shape[0], len(funcs)))
    for lo in range(0, x.shape[0], chunk_rows):
        block = x[lo:lo + chunk_rows]
        with np.errstate(all="ignore"):
            for j, fn in enumerate(funcs):
                out[lo:lo + chunk_rows, j] = fn(block)
    return out


def extract_features(values, catalog: Sequence[Feature] = CATALOG) -> np.ndarray:
    """Feature vector of a single window, in catalog order."""
    return extract_matrix(np.asarray(values, dtype=np.float64)[None, :], catalog)[0]


# --------------------------------------------------------------------------- matrix + state


@dataclass
class FeatureMatrix:
    window_ids: list[str]
    feature_names: list[str]
    values: np.ndarray
    provenance: str = CATALOG_VERSION

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.window_ids), len(self.feature_names)):
            raise ValueError(
                f"values shape {self.values.shape} does not match "
                f"{len(self.window_ids)} windows x {len(self.feature_names)} features")

    def rows(self, ids: Sequence[str]) -> "FeatureMatrix":
        pos = {w: i for i, w in enumerate(self.window_ids)}
        idx = [pos[w] for w in ids]
        return FeatureMatrix(list(ids), list(self.feature_names), self.values[idx], self.provenance)

    def columns(self, names: Sequence[str]) -> "FeatureMatrix":
        pos = {n: i for i, n in enumerate(self.feature_names)}
        missing = [n for n in names if n not in pos]
        if missing:
            raise KeyError(f"unknown feature(s): {', '.join(missing)}")
        idx = [pos[n] for n in names]
        return FeatureMatrix(list(self.window_ids), list(names), self.values[:, idx], self.provenance)


@dataclass
class ScalerState:
    """Training-set statistics replayed on validation / test rows."""

    feature_names: list[str]
    fill_values: np.ndarray
    variance_mask: np.ndarray
    minimum: np.ndarray = field(default_factory=lambda: np.zeros(0))
    maximum: np.ndarray = field(default_factory=lambda: np.zeros(0))
    threshold: float = 0.01

    @property
    def kept_names(self) -> list[str]:
        return [n for n, k in zip(self.feature_names, self.variance_mask) if k]

    def to_dict(self) -> dict:
        return {
            "catalog_version": CATALOG_VERSION,
            "feature_names": list(self.feature_names),
            "fill_values": [float(v) for v in self.fill_values],
            "variance_mask": [bool(v) for v in self.variance_mask],
            "variance_threshold": self.threshold,
            "kept_features": self.kept_names,
            "min": [float(v) for v in self.minimum],
            "max": [float(v) for v in self.maximum],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerState":
        return cls(list(d["feature_names"]), np.asarray(d["fill_values"], dtype=float),
                   np.asarray(d["variance_mask"], dtype=bool), np.asarray(d["min"], dtype=float),
                   np.asarray(d["max"], dtype=float), float(d["variance_threshold"]))


def fit_fill_values(values: np.ndarray) -> np.ndarray:
    """Per-column mean of finite entries (0 for columns with none)."""
    v = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(v)
    counts = finite.sum(axis=0)
    sums = np.where(finite, v, 0.0).sum(axis=0)
    empty = counts == 0
    if empty.any():
        warnings.warn(f"{int(empty.sum())} column(s) have no finite entries; filled with 0", stacklevel=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(empty, 0.0, sums / np.maximum(counts, 1))


def sanitize(values: np.ndarray, fill_values: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Replace NaN and +-inf by the column's finite-entry mean.

    Returns ``(clean, fill_values)``; pass the training fill values back in
    to sanitize validation/test rows with the same statistics.
    """
    v = np.asarray(values, dtype=np.float64)
    if fill_values is None:
        fill_values = fit_fill_values(v)
    bad = ~np.isfinite(v)
    return np.where(bad, np.broadcast_to(fill_values, v.shape), v), np.asarray(fill_values)


def variance_filter(values: np.ndarray, threshold: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Drop columns whose population variance is below ``threshold``."""
    v = np.asarray(values, dtype=np.float64)
    mask = v.var(axis=0) >= threshold
    if not mask.any():
        raise ValueError(f"every feature has variance below {threshold}; no usable features")
    return v[:, mask], mask


def minmax_fit(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(values, dtype=np.float64)
    return v.min(axis=0), v.max(axis=0)


def minmax_apply(values: np.ndarray, minimum: np.ndarray, maximum: np.ndarray) -> np.ndarray:
    """Map to ``(x - min) / (max - min)`` clipped to [0, 1]; constant columns map to 0."""
    v = np.asarray(values, dtype=np.float64)
    span = maximum - minimum
    with np.errstate(invalid="ignore", divide="ignore"):
        scaled = np.where(span > 0, (v - minimum) / np.where(span > 0, span, 1.0), 0.0)
    return np.clip(scaled, 0.0, 1.0)


def fit_preprocessing(train: FeatureMatrix, threshold: float = 0.01) -> ScalerState:
    """Fit sanitize -> variance filter -> min-max on training rows."""
    clean, fill = sanitize(train.values)
    kept, mask = variance_filter(clean, threshold)
    lo, hi = minmax_fit(kept)
    return ScalerState(list(train.feature_names), fill, mask, lo, hi, threshold)


def apply_preprocessing(matrix: FeatureMatrix, state: ScalerState) -> FeatureMatrix:
    pos = {n: i for i, n in enumerate(matrix.feature_names)}
    unknown = [n for n in state.feature_names if n not in pos]
    if unknown:
        raise KeyError(f"feature(s) missing from matrix: {', '.join(unknown)}")
    v = matrix.values[:, [pos[n] for n in state.feature_names]]
    clean, _ = sanitize(v, state.fill_values)
    scaled = minmax_apply(clean[:, state.variance_mask], state.minimum, state.maximum)
    return FeatureMatrix(list(matrix.window_ids), state.kept_names, scaled, matrix.provenance)


def robust_z(values) -> np.ndarray:
    """``(x - median) / IQR`` with linearly interpolated quartiles."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < 4:
        raise ValueError("robust_z needs at least 4 values")
    q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75], method="linear")
    iqr = q3 - q1
    if iqr == 0:
        warnings.warn("IQR is zero; dividing by 1", stacklevel=2)
        iqr = 1.0
    return (x - med) / iqr


# --------------------------------------------------------------------------- persistence


def write_matrix_csv(matrix: FeatureMatrix, path, meta: dict | None = None) -> None:
    """CSV with ``window_id`` plus one column per feature (floats as repr)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if meta is not None:
            fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        fh.write(",".join(["window_id", *matrix.feature_names]) + "\n")
        for wid, row in zip(matrix.window_ids, matrix.values):
            fh.write(wid + "," + ",".join(repr(float(v)) for v in row) + "\n")


def read_matrix_csv(path) -> FeatureMatrix:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln and not ln.startswith("#")]
    header = lines[0].split(",")
    if header[0] != "window_id":
        raise ValueError(f"{path}: first column must be window_id")
    ids, rows = [], []
    for ln in lines[1:]:
        parts = ln.split(",")
        ids.append(parts[0])
        rows.append([float(p) for p in parts[1:]])
    values = np.asarray(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)
    return FeatureMatrix(ids, header[1:], values)
