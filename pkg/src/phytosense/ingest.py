"""Sensor-stream ingestion, resampling, windowing, labeling and splits."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import BinaryIO, Iterable, Mapping, Sequence, Union

import numpy as np

from .rng import substream

GROUPS = ("saturated", "ml400", "ml200", "ml100")
HORIZONS = {"1min": 60, "5min": 300, "30min": 1800, "1h": 3600, "6h": 21600}
LABELS = ("healthy", "stressed", "overwatered", "underwatered", "unlabeled")
INTERVALS = ("t1", "t2", "t3")
CSV_COLUMNS = ("plant_id", "group", "timestamp", "edp_mv")
NATIVE_RATE_HZ = 10.0

# scheme -> group -> class assigned to t3 windows; t1 windows of mapped groups are healthy
DEFAULT_CLASS_MAPS = {
    "binary": {"saturated": "stressed", "ml200": "stressed", "ml100": "stressed"},
    "multiclass": {"saturated": "overwatered", "ml100": "underwatered"},
}

Source = Union[bytes, bytearray, str, os.PathLike, BinaryIO]


class IngestError(ValueError):
    """Malformed input record; ``line`` is 1-based and counts the header."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class SignalSeries:
    plant_id: str
    group: str
    timestamps: np.ndarray
    edp: np.ndarray
    soil_timestamps: np.ndarray | None = None
    soil_moisture: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.group not in GROUPS:
            raise ValueError(f"plant {self.plant_id}: unknown group {self.group!r}")
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.edp = np.asarray(self.edp, dtype=np.float64)
        if self.timestamps.shape != self.edp.shape:
            raise ValueError(f"plant {self.plant_id}: timestamps and edp differ in length")
        if self.timestamps.size > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ValueError(f"plant {self.plant_id}: timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.edp)):
            raise ValueError(f"plant {self.plant_id}: edp contains non-finite values")

    def __len__(self) -> int:
        return int(self.timestamps.size)

    @property
    def duration(self) -> float:
        if self.timestamps.size == 0:
            return 0.0
        return float(self.timestamps[-1] - self.timestamps[0] + 1.0)


@dataclass
class LabeledWindow:
    plant_id: str
    start: int
    horizon: str
    values: np.ndarray = field(repr=False)
    label: str = "unlabeled"
    interval: str | None = None
    group: str | None = None

    @property
    def window_id(self) -> str:
        return f"{self.plant_id}@{self.start}"

    @property
    def length(self) -> int:
        return HORIZONS[self.horizon]

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass
class SplitPlan:
    train: list[str]
    validation: list[str]
    test: list[str]
    held_out_plants: list[str]
    seed: int

    def __post_init__(self) -> None:
        tr, va, te = set(self.train), set(self.validation), set(self.test)
        if tr & va or tr & te or va & te:
            raise ValueError("split partitions overlap")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "held_out_plants": list(self.held_out_plants),
            "train": list(self.train),
            "validation": list(self.validation),
            "test": list(self.test),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitPlan":
        return cls(list(d["train"]), list(d["validation"]), list(d["test"]),
                   list(d["held_out_plants"]), int(d["seed"]))


# --------------------------------------------------------------------------- parsing


def parse_time(value) -> float:
    """Epoch seconds from a number, a numeric string, or an RFC3339/ISO string.

    Naive datetimes and bare dates are taken as UTC.
    """
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    s = str(value).strip()
    try:
        return float(s)
    except ValueError:
        pass
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _read_bytes(source: Source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    return source.read()


def _check_row(row: Mapping, line: int) -> tuple[str, str, float, float, float | None]:
    plant = (row.get("plant_id") or "").strip()
    if not plant:
        raise IngestError("missing plant_id", line)
    group = (row.get("group") or "").strip()
    if not group:
        raise IngestError(f"missing group for plant {plant}", line)
    if group not in GROUPS:
        raise IngestError(f"unknown group {group!r} (expected one of {', '.join(GROUPS)})", line)
    raw_ts = row.get("timestamp")
    if raw_ts is None or str(raw_ts).strip() == "":
        raise IngestError("missing timestamp", line)
    try:
        ts = parse_time(raw_ts)
    except (TypeError, ValueError):
        raise IngestError(f"unparseable timestamp {raw_ts!r}", line) from None
    try:
        edp = float(row.get("edp_mv"))
    except (TypeError, ValueError):
        raise IngestError(f"unparseable edp_mv {row.get('edp_mv')!r}", line) from None
    if not math.isfinite(edp) or not math.isfinite(ts):
        raise IngestError("non-finite timestamp or edp_mv", line)
    soil = row.get("soil_moisture")
    if soil is None or str(soil).strip() == "":
        soil_v = None
    else:
        try:
            soil_v = float(soil)
        except (TypeError, ValueError):
            raise IngestError(f"unparseable soil_moisture {soil!r}", line) from None
        if not 0.0 <= soil_v <= 1.0:
            raise IngestError(f"soil_moisture {soil_v} outside [0, 1]", line)
    return plant, group, ts, edp, soil_v


def _scan_csv(text: str):
    """Row-by-row CSV validation; yields checked tuples, raises IngestError."""
    lines = text.splitlines()
    offset = 0
    while offset < len(lines) and (lines[offset].startswith("#") or not lines[offset].strip()):
        offset += 1
    if offset == len(lines):
        raise IngestError("empty input: header required")
    reader = csv.reader(lines[offset:])
    header = [h.strip() for h in next(reader)]
    missing = [c for c in CSV_COLUMNS if c not in header]
    if missing:
        raise IngestError(f"header lacks column(s) {', '.join(missing)}", offset + 1)
    for i, fields in enumerate(reader):
        line = offset + 2 + i
        if not fields or (len(fields) == 1 and not fields[0].strip()):
            continue
        if fields[0].startswith("#"):
            continue
        if len(fields) != len(header):
            raise IngestError(f"expected {len(header)} fields, got {len(fields)}", line)
        yield _check_row(dict(zip(header, fields)), line)


def _csv_fast(source):
    """Columnar CSV read; returns None whenever a row needs the slow checker.

    On success the result is a list of per-plant column tuples.
    """
    import polars as pl

    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    try:
        df = pl.read_csv(
            source,
            comment_prefix="#",
            schema_overrides={"plant_id": pl.Categorical, "group": pl.Categorical, "timestamp": pl.Float64,
                              "edp_mv": pl.Float64, "soil_moisture": pl.Float64},
        )
    except Exception:
        return None
    if any(c not in df.columns for c in CSV_COLUMNS) or df.height == 0:
        return None
    if df.select(
        pl.any_horizontal(
            pl.col("plant_id").is_null().any(),
            pl.col("group").is_null().any(),
            pl.col("timestamp").is_null().any(),
            pl.col("edp_mv").is_null().any(),
            ~pl.col("edp_mv").is_finite().all(),
            ~pl.col("timestamp").is_finite().all(),
        )
    ).item():
        return None
    has_soil = "soil_moisture" in df.columns
    if has_soil:
        nonnull = df["soil_moisture"].drop_nulls()
        if nonnull.len() and (not nonnull.is_finite().all() or nonnull.min() < 0 or nonnull.max() > 1):
            return None
        has_soil = bool(nonnull.len())
    # split on the categorical codes; names come from a row carrying each code
    pcodes = df["plant_id"].to_physical().to_numpy()
    gcodes = df["group"].to_physical().to_numpy()
    ts_all = df["timestamp"].to_numpy()
    edp_all = df["edp_mv"].to_numpy()
    soil_all = df["soil_moisture"].to_numpy().astype(np.float64) if has_soil else None
    order = np.argsort(pcodes, kind="stable")
    uniq, first = np.unique(pcodes[order], return_index=True)
    bounds = np.append(first, order.size)
    named = []
    for k in range(uniq.size):
        idx = order[bounds[k]:bounds[k + 1]]
        plant = str(df["plant_id"][int(idx[0])])
        if not plant.strip():
            return None
        gs = np.unique(gcodes[idx])
        groups = sorted(str(df["group"][int(idx[np.argmax(gcodes[idx] == g)])]) for g in gs)
        if any(g not in GROUPS for g in groups):
            return None
        named.append((plant, groups, ts_all[idx], edp_all[idx], None if soil_all is None else soil_all[idx]))
    del df
    return sorted(named, key=lambda part: part[0])


def _columns_from_rows(rows: Iterable[tuple]):
    plants, groups, ts, edp, soil = [], [], [], [], []
    for p, g, t, e, s in rows:
        plants.append(p)
        groups.append(g)
        ts.append(t)
        edp.append(e)
        soil.append(np.nan if s is None else s)
    if not plants:
        raise IngestError("no data rows")
    soil_arr = np.asarray(soil, dtype=np.float64)
    return (np.asarray(plants, dtype=object), np.asarray(groups, dtype=object),
            np.asarray(ts, dtype=np.float64), np.asarray(edp, dtype=np.float64),
            None if np.all(np.isnan(soil_arr)) else soil_arr)


def _mean_collapse(ts: np.ndarray, vals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(ts, kind="stable")
    ts, vals = ts[order], vals[order]
    uniq, start = np.unique(ts, return_index=True)
    if uniq.size == ts.size:
        return ts, vals
    sums = np.add.reduceat(vals, start)
    counts = np.diff(np.append(start, ts.size))
    return uniq, sums / counts


def _split_plants(plants, groups, ts, edp, soil):
    """Per-plant column tuples from row-aligned arrays."""
    uniq, inverse = np.unique(plants.astype(str), return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(uniq.size + 1))
    parts = []
    for k, plant in enumerate(uniq):
        idx = order[bounds[k]:bounds[k + 1]]
        parts.append((str(plant), sorted(set(groups[idx].astype(str))), ts[idx], edp[idx],
                      None if soil is None else soil[idx]))
    return parts


def _assemble(parts) -> list[SignalSeries]:
    out = []
    for plant, g, ts, edp, soil in parts:
        if len(g) != 1:
            raise IngestError(f"plant {plant} assigned to several groups: {', '.join(g)}")
        t, e = _mean_collapse(ts, edp)
        st = sm = None
        if soil is not None:
            keep = ~np.isnan(soil)
            if keep.any():
                st, sm = _mean_collapse(ts[keep], soil[keep])
        out.append(SignalSeries(plant, g[0], t, e, st, sm))
    return out


def parse_records(source: Source, format: str = "csv") -> list[SignalSeries]:
    """Parse a CSV or NDJSON sample stream into one sorted series per plant.

    Duplicate timestamps within a plant are collapsed to the mean of their
    values.  Series are returned in ascending ``plant_id`` order.
    """
    if format not in ("csv", "ndjson"):
        raise ValueError(f"unsupported format {format!r}; use 'csv' or 'ndjson'")
    if format == "csv":
        path_like = isinstance(source, (str, os.PathLike))
        parts = _csv_fast(os.fspath(source) if path_like else _read_bytes(source))
        if parts is not None:
            return _assemble(parts)
        data = _read_bytes(source)
        cols = _columns_from_rows(_scan_csv(data.decode("utf-8-sig")))
    else:
        cols = _columns_from_rows(_scan_ndjson(_read_bytes(source).decode("utf-8-sig")))
    return _assemble(_split_plants(*cols))


def _scan_ndjson(text: str):
    for i, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise IngestError(f"invalid JSON: {exc.msg}", i) from None
        if not isinstance(obj, dict):
            raise IngestError("each line must be a JSON object", i)
        row = {k: ("" if v is None else v) for k, v in obj.items()}
        for key in ("edp_mv", "soil_moisture", "timestamp"):
            if key in row and not isinstance(row[key], str):
                row[key] = repr(row[key]) if isinstance(row[key], float) else str(row[key])
        yield _check_row(row, i)


def write_csv(series: Sequence[SignalSeries], sink, float_precision: int = 4) -> None:
    """Write series in the ingest CSV schema (integer epoch seconds when exact).

    Plants are written one at a time so memory stays bounded by the largest
    series.
    """
    import polars as pl

    with_soil = any(s.soil_moisture is not None for s in series)
    own = isinstance(sink, (str, os.PathLike))
    fh = open(sink, "wb") if own else sink
    try:
        if not series:
            pl.DataFrame({c: [] for c in CSV_COLUMNS}).write_csv(fh)
        for k, s in enumerate(series):
            ts = s.timestamps
            ts_col = pl.Series("timestamp", ts.astype(np.int64) if np.all(ts == np.floor(ts)) else ts)
            n = len(s)
            cols = [pl.repeat(s.plant_id, n, dtype=pl.Utf8, eager=True).alias("plant_id"),
                    pl.repeat(s.group, n, dtype=pl.Utf8, eager=True).alias("group"),
                    ts_col, pl.Series("edp_mv", s.edp)]
            if with_soil:
                soil = np.full(n, np.nan)
                if s.soil_moisture is not None:
                    pos = np.searchsorted(ts, s.soil_timestamps)
                    ok = (pos < ts.size) & (ts[np.minimum(pos, ts.size - 1)] == s.soil_timestamps)
                    soil[pos[ok]] = s.soil_moisture[ok]
                cols.append(pl.Series("soil_moisture", soil).fill_nan(None))
            pl.DataFrame(cols).write_csv(fh, include_header=(k == 0), float_precision=float_precision)
    finally:
        if own:
            fh.close()


# --------------------------------------------------------------------------- resampling


def resample(series: SignalSeries, target_rate: float = 1.0) -> SignalSeries:
    """Bin-average onto a ``1/target_rate`` grid; empty bins become gaps.

    A series already on the target grid passes through unchanged, however
    sparse; otherwise a target above the native rate is an error.
    """
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    ts = series.timestamps
    if ts.size == 0:
        return SignalSeries(series.plant_id, series.group, ts, series.edp,
                            series.soil_timestamps, series.soil_moisture)
    on_grid = np.all(ts * target_rate == np.floor(ts * target_rate))
    if ts.size > 1 and not on_grid:
        # closest sample spacing; gaps must not lower the estimate
        native = 1.0 / float(np.min(np.diff(ts)))
        if target_rate > native * (1 + 1e-6):
            raise ValueError(f"target rate {target_rate} Hz exceeds native rate {native:.4g} Hz")
    bins = np.floor(ts * target_rate)
    uniq, start = np.unique(bins, return_index=True)
    counts = np.diff(np.append(start, ts.size))
    means = np.add.reduceat(series.edp, start) / counts
    return SignalSeries(series.plant_id, series.group, uniq / target_rate, means,
                        series.soil_timestamps, series.soil_moisture)


# --------------------------------------------------------------------------- windowing


def contiguous_runs(timestamps: np.ndarray) -> list[tuple[int, int]]:
    """Index ranges ``[a, b)`` of gap-free 1 Hz runs."""
    ts = np.asarray(timestamps, dtype=np.float64)
    if ts.size == 0:
        return []
    if not np.all(ts == np.floor(ts)):
        raise ValueError("series is not on a 1 Hz integer grid; resample first")
    breaks = np.flatnonzero(np.diff(ts) != 1.0) + 1
    edges = np.concatenate(([0], breaks, [ts.size]))
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def window_starts(timestamps: np.ndarray, length: int, stride: int | None = None) -> list[int]:
    """Indices of window starts; windows never span a gap."""
    stride = length if stride is None else int(stride)
    if stride < 1:
        raise ValueError("stride must be >= 1 second")
    starts: list[int] = []
    for a, b in contiguous_runs(timestamps):
        starts.extend(range(a, b - length + 1, stride))
    return starts


def slice_windows(series: SignalSeries, horizon: str, stride: int | None = None) -> list[LabeledWindow]:
    if horizon not in HORIZONS:
        raise ValueError(f"unknown horizon {horizon!r}; expected one of {', '.join(HORIZONS)}")
    length = HORIZONS[horizon]
    ts = series.timestamps
    return [
        LabeledWindow(series.plant_id, int(ts[i]), horizon, series.edp[i:i + length], group=series.group)
        for i in window_starts(ts, length, stride)
    ]


# --------------------------------------------------------------------------- labeling


def _as_range(r) -> tuple[float, float]:
    a, b = r
    a, b = parse_time(a), parse_time(b)
    if not b > a:
        raise ValueError(f"empty interval [{a}, {b})")
    return a, b


def assign_labels(
    windows: Sequence[LabeledWindow],
    scheme: str,
    t1,
    t3,
    group_map: Mapping[str, str],
    class_map: Mapping[str, str] | None = None,
) -> list[LabeledWindow]:
    """Tag each window with its interval and class.

    ``t1``/``t3`` are half-open ``(start, end)`` ranges (epoch seconds or ISO
    strings).  ``group_map`` maps plant id to treatment group; ``class_map``
    maps a group to the class its t3 windows receive and defaults to the
    scheme's standard mapping.  A window belongs to t1/t3 only when fully
    inside it; anything else between the start of t1 and the end of t3 is t2.
    Windows entirely outside that span are dropped.  Windows of groups absent
    from ``class_map`` keep ``label="unlabeled"`` in every interval.
    """
    if scheme not in DEFAULT_CLASS_MAPS:
        raise ValueError(f"unknown scheme {scheme!r}")
    a1, b1 = _as_range(t1)
    a3, b3 = _as_range(t3)
    if b1 > a3:
        raise ValueError("t1 must end before t3 starts")
    classes = dict(DEFAULT_CLASS_MAPS[scheme] if class_map is None else class_map)
    out = []
    for w in windows:
        s, e = w.start, w.end
        if e <= a1 or s >= b3:
            continue
        group = group_map.get(w.plant_id, w.group)
        if group is None:
            raise ValueError(f"no group known for plant {w.plant_id}")
        if s >= a1 and e <= b1:
            interval = "t1"
        elif s >= a3 and e <= b3:
            interval = "t3"
        else:
            interval = "t2"
        label = "unlabeled"
        if group in classes and interval != "t2":
            label = "healthy" if interval == "t1" else classes[group]
        out.append(LabeledWindow(w.plant_id, w.start, w.horizon, w.values, label, interval, group))
    return out


# --------------------------------------------------------------------------- splits


def split_train_val(windows: Sequence[LabeledWindow], ratio: float = 0.8, seed: int = 0) -> SplitPlan:
    """Stratified (plant, class) shuffle split of labeled windows."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    strata: dict[tuple[str, str], list[str]] = defaultdict(list)
    for w in windows:
        if w.label != "unlabeled":
            strata[(w.plant_id, w.label)].append((w.start, w.window_id))
    rng = substream(seed, "split")
    train, val = [], []
    for key in sorted(strata):
        ids = [wid for _, wid in sorted(strata[key])]
        if len(ids) < 2:
            warnings.warn(f"stratum {key} has {len(ids)} window(s); assigned to train", stacklevel=2)
            train.extend(ids)
            continue
        perm = rng.permutation(len(ids))
        n_train = int(math.floor(len(ids) * ratio + 0.5))
        train.extend(ids[i] for i in perm[:n_train])
        val.extend(ids[i] for i in perm[n_train:])
    return SplitPlan(train, val, [], [], seed)


def make_split_plan(windows: Sequence[LabeledWindow], held_out: Iterable[str],
                    ratio: float = 0.8, seed: int = 0) -> SplitPlan:
    """Hold out whole plants for test, then stratified-split the rest."""
    held = sorted(set(held_out))
    held_set = set(held)
    labeled = [w for w in windows if w.label != "unlabeled"]
    test = [w.window_id for w in sorted(labeled, key=lambda w: (w.plant_id, w.start)) if w.plant_id in held_set]
    plan = split_train_val([w for w in labeled if w.plant_id not in held_set], ratio, seed)
    return SplitPlan(plan.train, plan.validation, test, held, seed)


def group_kfold(plants: Iterable[str], k: int, seed: int = 0) -> list[list[str]]:
    """Partition plant ids into ``k`` seeded folds of near-equal size.

    ``plants`` may be plant ids or labeled windows (their plant ids are used).
    """
    ids = sorted({p.plant_id if isinstance(p, LabeledWindow) else str(p) for p in plants})
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds the number of plants ({len(ids)})")
    perm = substream(seed, "folds").permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    return [sorted(chunk) for chunk in (shuffled[i::k] for i in range(k))]
