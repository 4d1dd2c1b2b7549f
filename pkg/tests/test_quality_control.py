import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crowdwind.core import Dataset, StationClass, StationRecord
from crowdwind.quality_control import (
    QcError,
    apply_qc,
    correlation_vs_distance,
    fit_exponential_decay,
    missing_data_filter,
    neighbour_filter,
    rank_transform,
    spearman,
)
from crowdwind.simulation import SimulationConfig, simulate

from . import oracles

T0 = np.datetime64("2024-01-01T00", "h")


def _series(values, present=None):
    v = np.asarray(values, float)
    return v, np.ones(v.shape, bool) if present is None else np.asarray(present, bool)


def _dataset(values, classes, lat=None, lon=None):
    values = np.asarray(values, float)
    n = values.shape[1]
    lat = np.linspace(52, 52.5, n) if lat is None else lat
    lon = np.full(n, -8.0) if lon is None else lon
    stations = tuple(StationRecord(f"s{k}", float(lat[k]), float(lon[k]), c) for k, c in enumerate(classes))
    times = T0 + np.arange(values.shape[0])
    present = np.isfinite(values)
    return Dataset(stations, times, values, present)


def test_missing_filter():
    ok, frac = missing_data_filter(_series(np.ones(100), np.arange(100) < 95))
    assert ok and frac == 0.95
    ok, _ = missing_data_filter(_series(np.ones(100), np.arange(100) < 89))
    assert not ok
    ok, frac = missing_data_filter(_series(np.ones(4), np.zeros(4)))
    assert not ok and frac == 0.0


def test_rank_transform_examples():
    np.testing.assert_allclose(rank_transform(_series([3, 1, 2])), [1.0, 1 / 3, 2 / 3])
    np.testing.assert_allclose(rank_transform(_series([1, 1, 2])), [0.5, 0.5, 1.0])
    x = np.array([0.5, 3.0, 2.0, 7.0])
    np.testing.assert_array_equal(rank_transform(_series(x)), rank_transform(_series(x ** 2)))
    with pytest.raises(QcError, match="degenerate ranks"):
        rank_transform(_series([2, 2, 2]))


def test_rank_transform_keeps_missing():
    r = rank_transform(_series([3, 9, 1], [True, False, True]))
    assert np.isnan(r[1]) and r[0] == 1.0 and r[2] == 0.5


def test_spearman_examples():
    a = np.random.default_rng(0).uniform(0.1, 5, 50)
    assert spearman(_series(a), _series(a ** 2)) == pytest.approx(1.0)
    assert spearman(_series(a), _series(-a)) == pytest.approx(-1.0)
    rng = np.random.default_rng(1)
    assert abs(spearman(_series(rng.normal(size=10 ** 4)), _series(rng.normal(size=10 ** 4)))) < 0.05
    with pytest.raises(QcError, match="insufficient overlap"):
        spearman(_series([1, 2, 3]), _series([1, 2, 3], [True, True, False]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 500), st.integers(0, 500)), min_size=4, max_size=30))
def test_spearman_matches_scipy_and_is_symmetric(pairs):
    a, b = np.array(pairs, float).T
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return
    r = spearman(_series(a), _series(b))
    assert r == pytest.approx(oracles.spearman(a, b), abs=1e-12)
    assert r == pytest.approx(spearman(_series(b), _series(a)), abs=1e-15)
    assert r == pytest.approx(spearman(_series(np.exp(a / 100)), _series(b ** 3)), abs=1e-12)


def _shared_field_dataset(n_good=7, junk=True, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.gamma(2.0, 2.0, 300)
    cols, classes = [], []
    for k in range(n_good):
        cols.append(base * (1 + 0.05 * k) + rng.normal(0, 0.3, 300) ** 2)
        classes.append(StationClass.MET if k < 3 else StationClass.A)
    if junk:
        cols.append(rng.gamma(2.0, 2.0, 300))
        classes.append(StationClass.U)
    return _dataset(np.column_stack(cols), classes)


def test_monotone_copies_pass_and_junk_fails():
    ds = _shared_field_dataset()
    reports = {r.station_id: r for r in neighbour_filter(ds)}
    assert all(reports[f"s{k}"].passed for k in range(7))
    junk = reports["s7"]
    assert not junk.passed and junk.fail_reasons
    assert junk.n_good_neighbours < 5


def test_met_stations_exempt():
    rng = np.random.default_rng(2)
    ds = _dataset(rng.gamma(2, 2, (200, 7)), [StationClass.MET] * 7)
    assert all(r.passed for r in neighbour_filter(ds))


def test_too_few_stations():
    ds = _dataset(np.random.default_rng(3).gamma(2, 2, (50, 4)), [StationClass.A] * 4)
    with pytest.raises(QcError, match="insufficient neighbours"):
        neighbour_filter(ds)


def test_filter_idempotent_and_values_untouched():
    ds = _shared_field_dataset()
    kept = apply_qc(ds, neighbour_filter(ds))
    assert kept.ids == tuple(f"s{k}" for k in range(7))
    again = apply_qc(kept, neighbour_filter(kept))
    assert again.ids == kept.ids
    np.testing.assert_array_equal(kept.values, ds.values[:, :7])


def test_missing_threshold_and_realtime_flag():
    ds = _shared_field_dataset(junk=False)
    vals = ds.values.copy()
    vals[:100, 5] = np.nan
    ds2 = _dataset(vals, ds.classes())
    reports = {r.station_id: r for r in neighbour_filter(ds2, missing_threshold=0.9, not_realtime={"s6"})}
    assert not reports["s5"].passed and "present fraction" in reports["s5"].fail_reasons[0]
    assert not reports["s6"].passed


def test_correlation_vs_distance_basic():
    a = np.random.default_rng(4).gamma(2, 2, 30)
    ds = _dataset(np.column_stack([a, a]), [StationClass.MET, StationClass.A], lat=[52, 52], lon=[-8, -8])
    rows = correlation_vs_distance(ds)
    assert len(rows) == 1
    assert rows[0].distance_km == 0.0 and rows[0].rho == pytest.approx(1.0)
    assert rows[0].class_pair == "MET-PWS"


def test_correlation_decays_on_simulated_field():
    sim = simulate(SimulationConfig(n_met=10, n_pws1=10, n_pws2=0, T=400, rho=0.3, seed=5))
    ds = sim.to_dataset()
    rows = correlation_vs_distance(ds)
    a, rate = fit_exponential_decay([r.distance_km for r in rows], [r.rho for r in rows])
    assert rate > 0
    inc = correlation_vs_distance(ds, increments=True, method="pearson", pair_class_filter={"MET-MET"})
    assert len(inc) == 45 and all(r.class_pair == "MET-MET" for r in inc)
