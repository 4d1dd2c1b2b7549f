import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import crowdwind.evaluation as ev
from crowdwind.core import ValidationError
from crowdwind.evaluation import crps_discretized, crps_gaussian, extreme_metrics, losocv, rmse
from crowdwind.gp.model import FitError
from crowdwind.simulation import SimulationConfig, simulate, strategy_spec

from . import oracles


def test_rmse_examples():
    assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5))
    with pytest.raises(ValidationError, match="length mismatch"):
        rmse([1, 2], [1])
    with pytest.raises(ValidationError, match="empty"):
        rmse([], [])
    with pytest.raises(ValidationError, match="present"):
        rmse([1.0, np.nan], [1.0, 2.0])


def test_crps_standard_normal_at_zero():
    assert crps_gaussian(0.0, 1.0, 0.0) == pytest.approx(0.23370, abs=1e-4)
    assert crps_gaussian(0.0, 1.0, 0.0) == pytest.approx((math.sqrt(2) - 1) / math.sqrt(math.pi), rel=1e-14)


def test_crps_location_scale():
    # CRPS(N(mu, s^2), y) = s * CRPS(N(0, 1), (y - mu) / s)
    rng = np.random.default_rng(0)
    mu, s, y = rng.normal(size=50), rng.uniform(0.1, 3, 50), rng.normal(size=50)
    np.testing.assert_allclose(crps_gaussian(mu, s, y), s * crps_gaussian(0.0, 1.0, (y - mu) / s), rtol=1e-12)
    np.testing.assert_allclose(crps_gaussian(mu + 5, s, y + 5), crps_gaussian(mu, s, y), rtol=1e-10)


def test_crps_rejects_bad_sigma():
    with pytest.raises(ValidationError, match="sigma"):
        crps_gaussian(0.0, 0.0, 1.0)


def test_crps_closed_form_vs_riemann_sum_on_random_triples():
    # the jump at y costs at most dy / 2, so the grid is mu +- 8 sigma with sigma <= 1
    rng = np.random.default_rng(1)
    for _ in range(200):
        mu, s = rng.normal(0, 2), rng.uniform(0.2, 1.0)
        y = mu + np.clip(rng.normal(0, 1.5), -7, 7) * s
        d = crps_discretized(stats.norm(mu, s).cdf, y, mu - 8 * s, mu + 8 * s, m=10_000)
        assert abs(d - crps_gaussian(mu, s, y)) < 1e-3


def test_discretized_example_and_grid_halving():
    exact = crps_gaussian(0.0, 1.0, 0.0)
    d1 = crps_discretized(stats.norm.cdf, 0.0, -8, 8, m=10_000)
    assert abs(d1 - exact) < 1e-3
    assert abs(crps_discretized(stats.norm.cdf, 0.0, -8, 8, m=20_000) - d1) < 1e-4
    step = lambda x: (np.asarray(x) >= 0.5).astype(float)  # noqa: E731
    assert crps_discretized(step, 0.5, -1, 2, m=1000) == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(0.2, 3), st.floats(-3, 3))
def test_crps_matches_quadrature(mu, s, y):
    assert crps_gaussian(mu, s, y) == pytest.approx(oracles.crps_quadrature(mu, s, y), abs=1e-8)


def test_discretized_edge_cases_and_convergence():
    cdf = stats.norm.cdf
    with pytest.raises(ValidationError, match="outside grid"):
        crps_discretized(cdf, 5.0, -4, 4)
    with pytest.raises(ValidationError, match="100 intervals"):
        crps_discretized(cdf, 0.0, -4, 4, m=10)
    exact = crps_gaussian(0.0, 1.0, 0.3)
    errs = [abs(crps_discretized(cdf, 0.3, -8, 8, m) - exact) for m in (100, 1000, 10_000)]
    assert errs[0] > errs[1] > errs[2]


def test_extreme_metrics_nested_and_bias_sign():
    rng = np.random.default_rng(2)
    truth = rng.gamma(2, 2, 1000)
    pred = truth - 0.5
    out = extreme_metrics(pred, truth)
    assert [out[q].n for q in (1.0, 2.5, 5.0)] == sorted(out[q].n for q in (1.0, 2.5, 5.0))
    assert out[5.0].n == 50
    assert all(m.bias == pytest.approx(-0.5) for m in out.values())
    assert all(m.rmse == pytest.approx(0.5) for m in out.values())
    assert out[1.0].pearson_r == pytest.approx(1.0)


def test_extreme_metrics_small_subset_warns():
    truth = np.arange(150.0)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        out = extreme_metrics(truth, truth, percentiles=(1.0, 5.0))
    assert 1.0 not in out and 5.0 in out
    assert any("fewer than 3" in str(x.message) for x in w)
    with pytest.raises(ValidationError, match="100 pairs"):
        extreme_metrics(truth[:50], truth[:50])


@pytest.fixture(scope="module")
def small_sim():
    return simulate(SimulationConfig(n_met=5, n_pws1=4, n_pws2=0, T=15, seed=3, sigma_pws1=0.4)).to_gp_data()


def test_losocv_scores_and_determinism(small_sim):
    spec = strategy_spec("grouped", "igp")
    a = losocv(small_sim, [spec])[0]
    b = losocv(small_sim, [spec])[0]
    assert a.complete and len(a.folds) == 5
    assert a.rmse == b.rmse and a.crps_sqrt == b.crps_sqrt
    assert a.rmse == pytest.approx(rmse(a.pred_ms, a.truth_ms))
    # the fold scores pool back into the aggregate (equal fold sizes)
    assert a.crps_sqrt == pytest.approx(np.mean([f.crps for f in a.folds]))
    assert a.rmse == pytest.approx(math.sqrt(np.mean([f.rmse ** 2 for f in a.folds])))


def test_losocv_records_failed_fold(small_sim, monkeypatch):
    real = ev.predict

    def flaky(fit, data, targets, *args, **kw):
        if targets[0].id == small_sim.ids[1]:
            raise FitError("synthetic failure")
        return real(fit, data, targets, *args, **kw)

    monkeypatch.setattr(ev, "predict", flaky)
    rep = losocv(small_sim, [strategy_spec("pooled", "igp")])[0]
    assert not rep.complete
    assert [f.station_id for f in rep.failures] == [small_sim.ids[1]]
    assert rep.failures[0].error == "synthetic failure"
    assert small_sim.ids[1] not in rep.per_station and np.isfinite(rep.rmse)


def test_losocv_needs_three_held_out(small_sim):
    with pytest.raises(ValidationError, match="at least 3"):
        losocv(small_sim.select_sites([0, 1, 5, 6]), [strategy_spec("pooled", "igp")])
