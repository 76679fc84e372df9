"""Wholesale price and demand time series: ingestion, resampling, demand ratio."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAX_FILL = 2
UNITS = {"lmp": "$/kWh", "demand": "MW", "ratio": "1"}
# accepted source units and their factor to the canonical unit of each kind
_CONVERT = {
    "lmp": {"$/kwh": 1.0, "$/mwh": 1e-3},
    "demand": {"mw": 1.0, "kw": 1e-3, "gw": 1e3},
}


class FeedError(ValueError):
    pass


@dataclass(frozen=True)
class TimeSeries:
    timestamps: np.ndarray            # datetime64[s], strictly increasing, uniform
    values: np.ndarray
    native_interval: np.timedelta64
    unit: str = "1"
    filled: tuple = field(default=(), compare=False)   # indices filled by interpolation

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[s]")
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "native_interval", np.timedelta64(self.native_interval, "s"))
        if ts.shape != vals.shape or ts.ndim != 1:
            raise FeedError("timestamps and values must be 1-D of equal length")
        if len(ts) == 0:
            raise FeedError("empty series")
        if not np.all(np.isfinite(vals)):
            raise FeedError("series contains missing values")
        if len(ts) > 1:
            d = np.diff(ts)
            if np.any(d <= np.timedelta64(0, "s")):
                raise FeedError("timestamps must be strictly increasing")
            if np.any(d != self.native_interval):
                raise FeedError("series is not uniformly spaced")

    def __len__(self):
        return len(self.values)

    @property
    def interval_minutes(self) -> float:
        return self.native_interval / np.timedelta64(1, "m")

    def mean(self) -> float:
        return float(self.values.mean())


def _parse_header(header: list, kind: str) -> float:
    if len(header) != 2 or header[0].strip().lower() != "timestamp":
        raise FeedError(f"expected header timestamp,value; got {header}")
    col = header[1].strip().lower().replace(" ", "")
    if col == "value":
        return 1.0
    # value[<unit>] names the source unit explicitly
    if col.startswith("value[") and col.endswith("]"):
        unit = col[6:-1]
        table = _CONVERT[kind]
        if unit not in table:
            raise FeedError(f"unit {unit!r} does not match a {kind} series (expected one of {sorted(table)})")
        return table[unit]
    raise FeedError(f"unrecognised value column {header[1]!r}")


def load_series(path, kind: str) -> TimeSeries:
    """Read a ``timestamp,value`` CSV into a validated uniform series.

    Runs of at most two missing points (absent rows or empty values) are
    filled by linear interpolation and listed in ``TimeSeries.filled``.
    """
    if kind not in _CONVERT:
        raise FeedError(f"kind must be one of {sorted(_CONVERT)}")
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FeedError(f"{path}: empty file") from None
        factor = _parse_header(header, kind)
        stamps, vals = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise FeedError(f"{path}:{lineno}: expected 2 columns")
            try:
                stamps.append(np.datetime64(row[0].strip().replace("Z", ""), "s"))
            except ValueError as exc:
                raise FeedError(f"{path}:{lineno}: bad timestamp {row[0]!r}") from exc
            text = row[1].strip()
            vals.append(float(text) * factor if text else np.nan)
    if len(stamps) < 2:
        raise FeedError(f"{path}: need at least two rows")
    ts = np.array(stamps, dtype="datetime64[s]")
    d = np.diff(ts)
    if np.any(d <= np.timedelta64(0, "s")):
        raise FeedError(f"{path}: timestamps are not strictly increasing")
    step = d.min()
    if np.any(d % step != np.timedelta64(0, "s")):
        raise FeedError(f"{path}: irregular spacing")
    full = np.arange(ts[0], ts[-1] + step, step)
    values = np.full(len(full), np.nan)
    values[((ts - ts[0]) // step).astype(int)] = vals
    missing = np.flatnonzero(np.isnan(values))
    if missing.size:
        runs = np.split(missing, np.flatnonzero(np.diff(missing) != 1) + 1)
        for run in runs:
            if len(run) > MAX_FILL:
                raise FeedError(f"{path}: gap of {len(run)} consecutive points at {full[run[0]]}")
            if run[0] == 0 or run[-1] == len(values) - 1:
                raise FeedError(f"{path}: missing point at the series boundary cannot be interpolated")
        good = ~np.isnan(values)
        idx = np.arange(len(values))
        values[missing] = np.interp(missing, idx[good], values[good])
        log.warning("%s: interpolated %d missing points", path, missing.size)
    if kind == "demand" and np.any(values <= 0):
        log.warning("%s: nonpositive demand values present", path)
    return TimeSeries(full, values, step, UNITS[kind], tuple(int(i) for i in missing))


def write_series(series: TimeSeries, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "value"])
        for t, v in zip(series.timestamps, series.values):
            w.writerow([str(t), repr(float(v))])


def demand_ratio(demand: TimeSeries) -> TimeSeries:
    if np.any(demand.values <= 0):
        raise FeedError("demand must be positive")
    return TimeSeries(demand.timestamps, demand.values / demand.values.max(),
                      demand.native_interval, "1")


def resample(series: TimeSeries, target_minutes: float) -> TimeSeries:
    """Block mean when coarsening, zero-order hold when refining."""
    target = np.timedelta64(int(round(target_minutes * 60)), "s")
    if target <= np.timedelta64(0, "s"):
        raise FeedError("target interval must be positive")
    native = series.native_interval
    if target == native:
        return series
    if target > native:
        if target % native:
            raise FeedError(f"{target} is not a multiple of {native}")
        k = int(target // native)
        if len(series) % k:
            raise FeedError(f"series length {len(series)} is not a multiple of {k}")
        blocks = series.values.reshape(-1, k)
        # mean about the first value: exact when a block is constant
        vals = blocks[:, 0] + (blocks - blocks[:, :1]).mean(axis=1)
        return TimeSeries(series.timestamps[::k], vals, target, series.unit)
    if native % target:
        raise FeedError(f"{native} is not a multiple of {target}")
    k = int(native // target)
    stamps = (series.timestamps[:, None] + np.arange(k) * target).ravel()
    return TimeSeries(stamps, np.repeat(series.values, k), target, series.unit)


SYNTHETIC_START = np.datetime64("2021-07-21T00:00:00", "s")
SYNTHETIC_MEAN_LMP = 0.0267   # $/kWh
SYNTHETIC_PEAK_HOUR = 17


def synthetic_day(seed: int = 0, mean_lmp: float = SYNTHETIC_MEAN_LMP,
                  peak_hour: int = SYNTHETIC_PEAK_HOUR, peak_mw: float = 19500.0):
    """A 24 h, 5-minute summer-weekday day: (lmp $/kWh, demand MW).

    Demand has a morning shoulder and a single evening peak at ``peak_hour``;
    the price is convex in demand, rescaled to ``mean_lmp``. Both series attain
    their unique maximum at ``peak_hour``:00.
    """
    rng = np.random.default_rng(seed)
    step = np.timedelta64(5, "m")
    n = 288
    stamps = SYNTHETIC_START + np.arange(n) * step
    h = np.arange(n) / 12.0
    shape = (0.58 + 0.07 * np.exp(-((h - 9.0) / 2.5) ** 2)
             + 0.38 * np.exp(-((h - peak_hour) / 4.0) ** 2)
             - 0.06 * np.exp(-((h - 4.0) / 2.0) ** 2))
    shape = shape + 0.004 * rng.standard_normal(n)
    ipk = peak_hour * 12
    shape[ipk] = shape.max() + 0.003
    demand = peak_mw * shape / shape[ipk]

    lo, hi = demand.min(), demand.max()
    s = (demand - lo) / (hi - lo)
    lmp = 0.016 + 0.045 * s ** 3 + 0.0015 * rng.standard_normal(n)
    lmp = np.maximum(lmp, 0.005)
    lmp[ipk] = lmp.max() + 0.002
    lmp = lmp * (mean_lmp / lmp.mean())
    return (TimeSeries(stamps, lmp, step, UNITS["lmp"]),
            TimeSeries(stamps, demand, step, UNITS["demand"]))


def shipped_feed_paths() -> tuple:
    base = Path(__file__).resolve().parent / "data"
    return base / "lmp_5min.csv", base / "demand_5min.csv"
