import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsomarket.feeds import (FeedError, TimeSeries, demand_ratio, load_series, resample,
                             shipped_feed_paths, synthetic_day, write_series)

T0 = np.datetime64("2021-07-21T00:00:00", "s")
FIVE = np.timedelta64(5, "m")


def series(values, step=FIVE, unit="MW"):
    values = np.asarray(values, dtype=float)
    return TimeSeries(T0 + np.arange(len(values)) * step, values, step, unit)


def write_rows(path, rows, header="timestamp,value"):
    path.write_text(header + "\n" + "\n".join(f"{t},{v}" for t, v in rows) + "\n")


def day_rows(n=288, drop=()):
    return [(str(T0 + i * FIVE), 1.0 + 0.01 * i) for i in range(n) if i not in drop]


def test_full_day(tmp_path):
    p = tmp_path / "d.csv"
    write_rows(p, day_rows())
    s = load_series(p, "demand")
    assert len(s) == 288
    assert s.interval_minutes == 5.0
    assert s.filled == ()


def test_single_gap_interpolated(tmp_path):
    p = tmp_path / "d.csv"
    write_rows(p, day_rows(drop={100}))
    s = load_series(p, "demand")
    assert len(s) == 288 and s.filled == (100,)
    assert s.values[100] == pytest.approx(2.0)


def test_empty_value_interpolated(tmp_path):
    rows = day_rows(20)
    rows[5] = (rows[5][0], "")
    rows[6] = (rows[6][0], "")
    p = tmp_path / "d.csv"
    write_rows(p, rows)
    s = load_series(p, "demand")
    assert s.filled == (5, 6)
    assert s.values[6] == pytest.approx(1.06)


def test_long_gap_rejected(tmp_path):
    p = tmp_path / "d.csv"
    write_rows(p, day_rows(drop={10, 11, 12}))
    with pytest.raises(FeedError):
        load_series(p, "demand")


def test_non_monotone_rejected(tmp_path):
    rows = day_rows(10)
    rows[3], rows[4] = rows[4], rows[3]
    p = tmp_path / "d.csv"
    write_rows(p, rows)
    with pytest.raises(FeedError):
        load_series(p, "lmp")


def test_units(tmp_path):
    p = tmp_path / "l.csv"
    write_rows(p, [(str(T0 + i * FIVE), 26.7) for i in range(12)], header="timestamp,value[$/MWh]")
    s = load_series(p, "lmp")
    assert np.allclose(s.values, 0.0267)
    assert s.unit == "$/kWh"
    write_rows(p, [(str(T0 + i * FIVE), 26.7) for i in range(12)], header="timestamp,value[MW]")
    with pytest.raises(FeedError):
        load_series(p, "lmp")


def test_demand_ratio():
    assert np.all(demand_ratio(series(np.full(10, 7.0))).values == 1.0)
    v = np.ones(288)
    v[17 * 12] = 2.0
    a = demand_ratio(series(v))
    assert a.values[17 * 12] == 1.0 and a.values.max() == 1.0
    with pytest.raises(FeedError):
        demand_ratio(series([1.0, 0.0]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.1, 1e5), min_size=2, max_size=50), st.floats(0.01, 1e3))
def test_demand_ratio_scale_invariant(vals, k):
    a = demand_ratio(series(vals)).values
    b = demand_ratio(series(np.array(vals) * k)).values
    assert np.allclose(a, b, rtol=1e-12)
    assert np.all((a > 0) & (a <= 1.0))


def test_resample_examples():
    s = series(np.arange(288, dtype=float))
    hourly = resample(s, 60)
    assert len(hourly) == 24
    assert hourly.values[0] == pytest.approx(np.arange(12).mean())
    fine = resample(s, 1)
    assert len(fine) == 1440
    assert np.all(fine.values[:5] == 0.0) and np.all(fine.values[5:10] == 1.0)
    assert resample(s, 5) is s
    with pytest.raises(FeedError):
        resample(s, 7)
    with pytest.raises(FeedError):
        resample(s, 2)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40), st.sampled_from([1, 2, 3, 4, 6]))
def test_round_trip_exact(vals, k):
    s = series(vals, step=np.timedelta64(k * 60, "s"))
    up = resample(s, 1)
    back = resample(up, k)
    assert np.array_equal(back.values, s.values)
    assert np.array_equal(back.timestamps, s.timestamps)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=12, max_size=12).map(lambda v: v * 24))
def test_downsample_preserves_mean(vals):
    s = series(vals)
    assert resample(s, 60).mean() == pytest.approx(s.mean(), rel=1e-12, abs=1e-15)


def test_synthetic_day_properties():
    lmp, dem = synthetic_day(0)
    assert len(lmp) == len(dem) == 288
    assert lmp.mean() == pytest.approx(0.0267, rel=1e-12)
    assert int(np.argmax(lmp.values)) == int(np.argmax(dem.values)) == 17 * 12
    assert np.sum(dem.values == dem.values.max()) == 1
    a, b = synthetic_day(3)
    c, d = synthetic_day(3)
    assert np.array_equal(a.values, c.values) and np.array_equal(b.values, d.values)


def test_shipped_feeds_match_generator(tmp_path):
    lmp_path, dem_path = shipped_feed_paths()
    lmp, dem = load_series(lmp_path, "lmp"), load_series(dem_path, "demand")
    g_lmp, g_dem = synthetic_day(0)
    assert np.array_equal(lmp.values, g_lmp.values)
    assert np.array_equal(dem.values, g_dem.values)
    p = tmp_path / "rt.csv"
    write_series(lmp, p)
    assert np.array_equal(load_series(p, "lmp").values, lmp.values)


def test_series_invariants():
    with pytest.raises(FeedError):
        TimeSeries(T0 + np.array([0, 5, 15]) * np.timedelta64(1, "m"), [1.0, 2.0, 3.0], FIVE)
    with pytest.raises(FeedError):
        series([1.0, np.nan])
