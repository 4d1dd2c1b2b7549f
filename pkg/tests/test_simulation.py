import math

import numpy as np
import pytest

from crowdwind.core import StationClass, StationRecord, ValidationError
from crowdwind.simulation import SIM_GROUPS, SimulationConfig, simulate, strategy_spec, summarise_study, StudyRow

from . import oracles


def _pair_at(distance_km):
    # two points on a meridian: 1 degree of latitude is R * pi / 180 km
    dlat = distance_km / (oracles.R_EARTH * math.pi / 180)
    return (StationRecord("MET00", 52.0, -8.0, StationClass.MET),
            StationRecord("MET01", 52.0 + dlat, -8.0, StationClass.MET))


def test_default_layout_counts():
    sim = simulate(SimulationConfig(T=3))
    classes = [s.station_class for s in sim.stations]
    assert len(classes) == 49
    assert classes.count(StationClass.MET) == 23 and classes.count(StationClass.U) == 7
    assert sim.junk.sum() == 7
    assert all(51.5 <= s.lat <= 55.5 and -10 <= s.lon <= -6 for s in sim.stations)


def test_seed_determinism():
    a = simulate(SimulationConfig(T=20, seed=5))
    b = simulate(SimulationConfig(T=20, seed=5))
    c = simulate(SimulationConfig(T=20, seed=6))
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.z, b.z)
    assert not np.allclose(a.y, c.y)


def test_observation_is_latent_plus_class_noise():
    sim = simulate(SimulationConfig(T=4000, seed=1, n_met=3, n_pws1=3, n_pws2=2, sigma_pws1=0.4))
    noise = sim.y - sim.z
    for k, s in enumerate(sim.stations):
        if sim.junk[k]:
            continue
        expected = 0.2 if s.station_class is StationClass.MET else 0.4
        assert noise[:, k].std() == pytest.approx(expected, rel=0.05)


def test_marginal_variance_and_no_autocorrelation():
    sim = simulate(SimulationConfig(T=4000, rho=0.0, seed=2, n_met=10, n_pws1=0, n_pws2=0))
    z = sim.z
    assert z.var() == pytest.approx(0.49, rel=0.05)
    lag1 = np.mean([np.corrcoef(z[:-1, k], z[1:, k])[0, 1] for k in range(z.shape[1])])
    assert abs(lag1) < 0.03


def test_correlation_at_effective_range():
    sim = simulate(SimulationConfig(layout=_pair_at(200.0), T=10_000, rho=0.0, seed=3))
    r = np.corrcoef(sim.z[:, 0], sim.z[:, 1])[0, 1]
    assert r == pytest.approx(math.sqrt(8) * oracles.bessel_k1(math.sqrt(8)), abs=0.03)


def test_ar1_stationary_covariance_over_replications():
    rho, reps, T = 0.8, 3000, 5
    layout = _pair_at(50.0)
    Z = np.array([simulate(SimulationConfig(layout=layout, T=T, rho=rho, seed=s)).z[:, 0] for s in range(reps)])
    for lag in (0, 1, 4):
        prod = Z[:, 0] * Z[:, lag]
        se = prod.std() / math.sqrt(reps)
        assert abs(prod.mean() - 0.49 * rho ** lag) < 3 * se
    # stationary start: the variance does not drift along the series
    assert abs(Z[:, -1].var() - Z[:, 0].var()) < 0.1


def test_junk_stations_are_uncorrelated():
    sim = simulate(SimulationConfig(T=10_000, seed=4, n_met=4, n_pws1=2, n_pws2=2))
    for j in np.flatnonzero(sim.junk):
        for k in range(len(sim.stations)):
            if k != j:
                assert abs(oracles.spearman(sim.y[:, j], sim.y[:, k])) < 0.1


def test_explicit_junk_group_and_scale():
    layout = _pair_at(100.0)
    sim = simulate(SimulationConfig(layout=layout, T=5000, junk_group=frozenset({"MET01"}), junk_sd=1.0, seed=5))
    assert sim.junk.tolist() == [False, True]
    assert sim.y[:, 1].std() == pytest.approx(1.0, rel=0.05)
    none = simulate(SimulationConfig(layout=layout, T=10, junk_group=frozenset()))
    assert not none.junk.any()


@pytest.mark.parametrize("kw,msg", [
    ({"sigma_z": 0.0}, "positive"),
    ({"phi": -1.0}, "positive"),
    ({"T": 1}, "T >= 2"),
    ({"rho": 1.0}, "rho"),
    ({"layout": _pair_at(10.0), "junk_group": frozenset({"nope"})}, "not in layout"),
])
def test_config_errors(kw, msg):
    with pytest.raises(ValidationError, match=msg):
        SimulationConfig(**kw)


def test_strategy_specs():
    assert strategy_spec("reliable", "igp").classes == frozenset({StationClass.MET})
    assert strategy_spec("pooled", "ar1").nugget == "pooled"
    assert strategy_spec("grouped", "igp").groups == SIM_GROUPS
    with pytest.raises(ValidationError, match="unknown strategy"):
        strategy_spec("best", "igp")


def test_summary_averages_and_counts_failures():
    rows = [StudyRow("igp", "pooled", 0.3, r, 0.4 + 0.1 * r, 0.2, 200.0, 0.7, float("nan"), {"all": 0.3})
            for r in range(2)]
    rows.append(StudyRow("igp", "pooled", 0.3, 2, *[float("nan")] * 5, error="boom"))
    (rec,) = summarise_study(rows)
    assert rec["rmse"] == pytest.approx(0.45) and rec["n_reps"] == 2 and rec["n_failed"] == 1
    assert rec["sigma_all"] == pytest.approx(0.3)
