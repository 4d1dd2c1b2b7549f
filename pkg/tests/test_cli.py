"""End-to-end runs of every subcommand on a small synthetic world."""
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from crowdwind import io
from crowdwind.cli import main
from crowdwind.core import Dataset, WeibullParams
from crowdwind.simulation import SimulationConfig, simulate

T = 72


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    d = tmp_path_factory.mktemp("world")
    sim = simulate(SimulationConfig(n_met=8, n_pws1=6, n_pws2=2, T=T, box_deg=2.0, lat0=52.0, lon0=-9.0,
                                    mean=2.2, sigma_pws1=0.3, seed=7))
    ds = sim.to_dataset()
    speed = Dataset(ds.stations, ds.times, ds.values ** 2, ds.present)
    io.write_stations(sim.stations, d / "stations.csv")
    io.write_observations(speed, d / "obs.csv")
    g_lat, g_lon = np.meshgrid(np.linspace(51.8, 54.2, 7), np.linspace(-9.2, -6.8, 7), indexing="ij")
    params = [WeibullParams(1.8 + 0.1 * (la - 53), 5.5 + 0.3 * (lo + 8)) for la, lo in zip(g_lat.ravel(), g_lon.ravel())]
    io.write_grid(g_lat.ravel(), g_lon.ravel(), params, d / "grid.csv")
    (d / "model.cfg").write_text("# small test model\nvariant = igp\nscale_model = linear\nnugget = grouped\n")
    return d, sim


def _run(*argv):
    return main([str(a) for a in argv])


def test_fit_dist(world):
    d, _ = world
    assert _run("fit-dist", "--observations", d / "obs.csv", "--out", d / "dist.csv") == 0
    rows = io.read_table(d / "dist.csv")
    assert len(rows) == 16 * 3
    assert {r["family"] for r in rows} == {"weibull", "gamma", "lognormal"}


def test_qc_flags_junk(world):
    d, sim = world
    assert _run("qc", "--stations", d / "stations.csv", "--observations", d / "obs.csv", "--out", d / "qc.csv") == 0
    rows = {r["station_id"]: r for r in io.read_table(d / "qc.csv")}
    assert len(rows) == 16
    for k, sid in enumerate(sim.ids):
        if sim.junk[k]:
            assert rows[sid]["passed"] == "false"
        elif sid.startswith("MET"):
            assert rows[sid]["passed"] == "true"


@pytest.fixture(scope="module")
def corrected(world):
    d, _ = world
    assert _run("bias-correct", "--stations", d / "stations.csv", "--observations", d / "obs.csv",
                "--grid", d / "grid.csv", "--scale-model", "linear", "--leave-uncorrected", "U",
                "--out", d / "corrected.csv", "--calib-report", d / "calib.csv") == 0
    return d / "corrected.csv"


def test_bias_correct_outputs(world, corrected):
    d, _ = world
    rows = io.read_table(corrected)
    assert len(rows) == 16 * T and "corrected_ms" in rows[0]
    met = [r for r in rows if r["station_id"].startswith("MET")]
    assert all(r["corrected_ms"] == r["wind_speed_ms"] for r in met)
    assert len(io.read_table(d / "calib.csv")) == 16


@pytest.fixture(scope="module")
def fitted(world, corrected):
    d, _ = world
    assert _run("fit", "--corrected", corrected, "--stations", d / "stations.csv", "--grid", d / "grid.csv",
                "--config", d / "model.cfg", "--out", d / "fit.json") == 0
    return d / "fit.json"


def test_fit_document(fitted):
    doc = json.loads(fitted.read_text())
    assert set(doc["inputs"]) == {"stations", "corrected", "grid"}
    assert doc["model"]["variant"] == "igp"
    assert doc["config"]["scale_model"] == "linear"


def test_predict(world, fitted):
    d, sim = world
    io.write_table(d / "targets.csv", ["id", "lat", "lon", "class"],
                   [["site1", 52.7, -8.1, "MET"], ["site2", 53.2, -7.6, ""]])
    assert _run("predict", "--fit", fitted, "--targets", d / "targets.csv", "--out", d / "pred.csv") == 0
    rows = io.read_table(d / "pred.csv")
    assert len(rows) == 2 * T
    assert all(float(r["post_sd_sqrt"]) > 0 for r in rows)
    assert all(float(r["mean_ms"]) == pytest.approx(float(r["post_mean_sqrt"]) ** 2 + float(r["post_sd_sqrt"]) ** 2)
               for r in rows)
    stamp = rows[5]["timestamp"]
    io.write_table(d / "targets_t.csv", ["id", "lat", "lon", "timestamp"], [["site1", 52.7, -8.1, stamp]])
    assert _run("predict", "--fit", fitted, "--targets", d / "targets_t.csv", "--out", d / "pred_t.csv") == 0
    (row,) = io.read_table(d / "pred_t.csv")
    match = next(r for r in rows if r["target_id"] == "site1" and r["timestamp"] == stamp)
    assert float(row["post_mean_sqrt"]) == pytest.approx(float(match["post_mean_sqrt"]), rel=1e-12)


def test_predict_refuses_changed_inputs(world, fitted, tmp_path, capsys):
    d, _ = world
    doc = json.loads(fitted.read_text())
    moved = tmp_path / "grid.csv"
    shutil.copy(d / "grid.csv", moved)
    moved.write_text(moved.read_text() + "-6.5,54.5,2.0,6.0\n")
    doc["inputs"]["grid"][0] = str(moved)
    (tmp_path / "fit.json").write_text(json.dumps(doc))
    io.write_table(tmp_path / "t.csv", ["id", "lat", "lon"], [["a", 52.5, -8.0]])
    assert _run("predict", "--fit", tmp_path / "fit.json", "--targets", tmp_path / "t.csv",
                "--out", tmp_path / "p.csv") == 2
    assert "changed since fitting" in capsys.readouterr().err


def test_losocv(world, corrected):
    d, _ = world
    assert _run("losocv", "--corrected", corrected, "--stations", d / "stations.csv", "--grid", d / "grid.csv",
                "--models", "igp-met,igp-grouped", "--config", d / "model.cfg", "--out", d / "cv.csv") == 0
    rows = io.read_table(d / "cv.csv")
    summary = {r["model_id"]: r for r in rows if r["station_id"] == "ALL"}
    assert set(summary) == {"igp-met", "igp-grouped"}
    assert len(rows) == 2 * (1 + 8)
    assert all(float(r["rmse"]) > 0 for r in summary.values())


def test_evaluate(world, fitted):
    d, _ = world
    io.write_table(d / "tg_met.csv", ["id", "lat", "lon"],
                   [[s.id, s.lat, s.lon] for s in world[1].stations if s.id.startswith("MET")][:2])
    assert _run("predict", "--fit", fitted, "--targets", d / "tg_met.csv", "--out", d / "pred_met.csv") == 0
    assert _run("evaluate", "--pred", d / "pred_met.csv", "--truth", d / "obs.csv", "--out", d / "eval.csv") == 0
    rows = {r["metric"]: r for r in io.read_table(d / "eval.csv")}
    assert {"rmse", "crps_sqrt", "top5_rmse", "top5_bias"} <= set(rows)
    assert "top1_rmse" not in rows  # 144 pairs leave fewer than 3 in the top 1%
    assert int(rows["rmse"]["n"]) == 2 * T


def test_simulate_and_sim_study(tmp_path):
    cfg = tmp_path / "sim.cfg"
    cfg.write_text("n_met = 5\nn_pws1 = 3\nn_pws2 = 1\nT = 20\nseed = 3\n")
    assert _run("simulate", "--config", cfg, "--out", tmp_path / "o.csv", tmp_path / "s.csv") == 0
    assert len(io.read_table(tmp_path / "o.csv")) == 9 * 20
    assert len(io.read_stations(tmp_path / "s.csv")) == 9
    cfg.write_text(cfg.read_text() + "n_reps = 1\nnoise_levels = 0.3\nvariants = igp\n")
    assert _run("sim-study", "--config", cfg, "--out", tmp_path / "t9.csv", tmp_path / "t10.csv") == 0
    t9 = io.read_table(tmp_path / "t9.csv")
    assert [r["strategy"] for r in t9] == ["reliable", "pooled", "grouped"]
    t10 = io.read_table(tmp_path / "t10.csv")
    assert "sigma_PWS-2" in t10[0]


def test_errors_exit_with_message(tmp_path, capsys):
    assert _run("qc", "--stations", tmp_path / "none.csv", "--observations", tmp_path / "none.csv",
                "--out", tmp_path / "x.csv") == 2
    assert "crowdwind qc: error" in capsys.readouterr().err


def test_help_lists_every_subcommand():
    out = subprocess.run([sys.executable, "-m", "crowdwind.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("fit-dist", "qc", "bias-correct", "fit", "predict", "losocv", "evaluate", "simulate", "sim-study"):
        assert cmd in out.stdout
