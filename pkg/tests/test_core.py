import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdwind import io
from crowdwind.core import (
    StationClass,
    StationRecord,
    ValidationError,
    WindSeries,
    hour_of_day,
    next_hour_of_day,
    to_hour,
    validate_dataset,
)


def _stations(n=2):
    return [StationRecord(f"s{k}", 52.0 + 0.1 * k, -8.0, StationClass.MET) for k in range(n)]


def test_two_aligned_series():
    ds = validate_dataset(_stations(), [WindSeries("s0", "2024-01-01T00:00Z", [1.0, 2.0, 3.0]),
                                        WindSeries("s1", "2024-01-01T00:00Z", [2.0, 2.5, 4.0])])
    assert ds.n_sites == 2 and ds.n_times == 3
    assert ds.present.all()


def test_negative_speed_rejected():
    with pytest.raises(ValidationError, match="negative wind speed"):
        WindSeries("s0", "2024-01-01T00:00Z", [1.0, -1.0])


def test_non_finite_speed_rejected():
    with pytest.raises(ValidationError, match="non-finite"):
        WindSeries("s0", "2024-01-01T00:00Z", [1.0, float("inf")])


def test_offset_series_merge_on_union_axis():
    # s0 covers 00-02, s1 covers 01-03: axis 00..03, hand-built masks
    ds = validate_dataset(_stations(), [WindSeries("s0", "2024-01-01T00:00Z", [1.0, 2.0, 3.0]),
                                        WindSeries("s1", "2024-01-01T01:00Z", [5.0, 6.0, 7.0])])
    assert ds.n_times == 4
    assert str(ds.times[0]) == "2024-01-01T00"
    np.testing.assert_array_equal(ds.present[:, 0], [True, True, True, False])
    np.testing.assert_array_equal(ds.present[:, 1], [False, True, True, True])
    np.testing.assert_array_equal(ds.values[ds.present[:, 1], 1], [5.0, 6.0, 7.0])


def test_duplicate_station_and_unknown_reference():
    st_ = _stations() + [StationRecord("s0", 53, -7, StationClass.A)]
    with pytest.raises(ValidationError, match="duplicate station id"):
        validate_dataset(st_, [WindSeries("s0", "2024-01-01T00:00Z", [1.0])])
    with pytest.raises(ValidationError, match="unknown station"):
        validate_dataset(_stations(), [WindSeries("zz", "2024-01-01T00:00Z", [1.0])])


def test_non_hourly_timestamp_rejected():
    with pytest.raises(ValidationError, match="hour-aligned"):
        to_hour("2024-01-01T00:30Z")


def test_hour_of_day_convention():
    assert hour_of_day("2024-06-01T05:00Z") == 5
    assert hour_of_day("2024-06-01T00:00Z") == 24
    assert hour_of_day("2024-06-01T23:00Z") == 23
    assert next_hour_of_day(24) == 1
    assert next_hour_of_day(7) == 8


def test_offset_timestamp_converted_to_utc():
    assert to_hour("2024-06-01T06:00+01:00") == to_hour("2024-06-01T05:00Z")


def test_station_record_validation():
    with pytest.raises(ValidationError):
        StationRecord("x", 91.0, 0.0, StationClass.MET)
    with pytest.raises(ValidationError):
        StationRecord("x", 50.0, 0.0, StationClass.MET, dist_to_sea_km=-1.0)
    with pytest.raises(ValidationError, match="unknown station class"):
        StationClass.parse("Z")


@st.composite
def _datasets(draw):
    n = draw(st.integers(1, 4))
    series = []
    for k in range(n):
        start = draw(st.integers(0, 5))
        vals = draw(st.lists(st.one_of(st.none(), st.floats(0, 40, allow_nan=False)), min_size=1, max_size=8))
        if all(v is None for v in vals):
            vals[0] = 1.0
        # trim so the series really starts and ends at a present value
        while vals[-1] is None:
            vals.pop()
        while vals[0] is None:
            vals.pop(0)
        series.append(WindSeries(f"s{k}", np.datetime64("2024-01-01T00", "h") + start, vals))
    return _stations(n), series


@settings(max_examples=40, deadline=None)
@given(_datasets())
def test_csv_round_trip_is_exact(tmp_path_factory, data):
    stations, series = data
    ds = validate_dataset(stations, series)
    d = tmp_path_factory.mktemp("rt")
    io.write_stations(ds.stations, d / "st.csv")
    io.write_observations(ds, d / "obs.csv")
    back = io.load_dataset(d / "st.csv", d / "obs.csv")
    assert back.equals(ds)
    starts = [s.t0 for s in series]
    ends = [s.t0 + len(s) - 1 for s in series]
    assert back.n_times == int((max(ends) - min(starts)) / np.timedelta64(1, "h")) + 1


def test_read_config(tmp_path):
    p = tmp_path / "m.cfg"
    p.write_text("# comment\n[model]\nvariant = ar1\nclasses = 'MET,A'  # trailing\n")
    assert io.read_config(p) == {"variant": "ar1", "classes": "MET,A"}
    p.write_text("novalue\n")
    with pytest.raises(ValidationError, match="key = value"):
        io.read_config(p)


def test_missing_column_reported(tmp_path):
    p = tmp_path / "obs.csv"
    p.write_text("station_id,timestamp\ns0,2024-01-01T00:00Z\n")
    with pytest.raises(ValidationError, match="wind_speed_ms"):
        io.read_observations(p)
