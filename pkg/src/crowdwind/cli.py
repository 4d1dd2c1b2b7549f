"""Command-line entry point: ``crowdwind <command> ...``.

Every command reads and writes plain CSV (or JSON for fitted models). Model
and simulation settings come from ``key = value`` files; see README.md.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import io
from .bias_correction import CalibrationError, GridParamField, bias_correct, calibrate, distance_to_coast_km
from .core import StationClass, ValidationError, to_hour
from .distributions import DistFamily, FitError, fit_mle, sqrt_weibull_mean
from .evaluation import crps_gaussian, extreme_metrics, losocv, rmse
from .gp.model import GpData, ModelFit, ModelSpec, Target, fit, predict
from .quality_control import QcError, neighbour_filter
from .simulation import STRATEGIES, SimulationConfig, run_simulation_study, simulate, strategy_spec, summarise_study

log = logging.getLogger("crowdwind")

TRUE = {"1", "true", "yes", "on"}


# --------------------------------------------------------------------------- helpers

def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _bool(text: str) -> bool:
    return str(text).strip().lower() in TRUE


def _classes(text: str) -> frozenset:
    return frozenset(StationClass.parse(c) for c in text.split(",") if c.strip())


def _groups(text: str) -> dict:
    out = {}
    for item in text.split(","):
        if item.strip():
            cls, label = item.split(":")
            out[StationClass.parse(cls)] = label.strip()
    return out


def model_spec_from_config(cfg: dict, variant: str | None = None, name: str = "") -> ModelSpec:
    return ModelSpec(
        variant=variant or cfg.get("variant", "igp"),
        nugget=cfg.get("nugget", "grouped"),
        groups=_groups(cfg["groups"]) if cfg.get("groups") else None,
        classes=_classes(cfg["classes"]) if cfg.get("classes") else None,
        covariate=_bool(cfg.get("covariate", "true")),
        diurnal=_bool(cfg.get("diurnal", "true")),
        transform=cfg.get("transform", "sqrt"),
        name=name or cfg.get("name", ""),
    )


def parse_model_token(token: str, cfg: dict) -> ModelSpec:
    """``variant-strategy`` with strategy ``met``, ``pooled`` or ``grouped``, e.g. ``igp-grouped``."""
    try:
        variant, strategy = token.strip().split("-", 1)
    except ValueError:
        raise ValidationError(f"model token {token!r} is not variant-strategy") from None
    spec = model_spec_from_config(cfg, variant, name=token.strip())
    if strategy == "met":
        return replace(spec, nugget="pooled", classes=frozenset({StationClass.MET}))
    if strategy in ("pooled", "grouped"):
        return replace(spec, nugget=strategy)
    raise ValidationError(f"unknown strategy {strategy!r} in {token!r}")


def load_model_inputs(stations_path, obs_path, grid_path, cfg: dict):
    """Dataset, calibration and model-scale data with the covariate filled in."""
    value_column = cfg.get("value_column", "")
    if not value_column:
        with open(obs_path, newline="") as fh:
            columns = next(csv.reader(fh), [])
        value_column = "corrected_ms" if "corrected_ms" in columns else "wind_speed_ms"
    dataset = io.load_dataset(stations_path, obs_path, value_column)
    lat, lon, params = io.read_grid(grid_path)
    coast = io.read_coastline(cfg["coastline"]) if cfg.get("coastline") else None
    cal = calibrate(dataset, GridParamField.from_points(lat, lon, params),
                    cfg.get("shape_model", "linear"), cfg.get("scale_model", "spline+dist"), coast)
    source = cfg.get("x1_source", "gwa")
    x1 = []
    for sid in dataset.ids:
        sc = cal.stations[sid]
        p = sc.station_mle if (source == "mle" and sc.station_mle is not None) else sc.calibrated
        x1.append(sqrt_weibull_mean(p))
    data = GpData.from_dataset(dataset, np.array(x1), cfg.get("transform", "sqrt"))
    return dataset, cal, data, coast


def _write_csv(path, header, rows):
    io.write_table(path, header, rows)
    log.info("wrote %s", path)


# --------------------------------------------------------------------------- commands

def cmd_fit_dist(args) -> int:
    series = io.read_observations(args.observations, args.value_column)
    rows = []
    for s in series:
        for fam in DistFamily:
            try:
                f = fit_mle(fam, s.observed)
            except FitError as exc:
                log.warning("%s %s: %s", s.station_id, fam.value, exc)
                continue
            rows.append([s.station_id, fam.value, f.params[0], f.params[1], f.loglik, f.ks_stat, f.p95_abs_diff])
    _write_csv(args.out, ["station_id", "family", "param1", "param2", "loglik", "ks", "p95diff"], rows)
    return 0


def cmd_qc(args) -> int:
    dataset = io.load_dataset(args.stations, args.observations)
    reports = neighbour_filter(dataset, args.min_neighbours, args.rho_min,
                               missing_threshold=args.missing_threshold)
    rows = [[r.station_id, r.frac_present, r.n_good_neighbours, str(r.passed).lower(), "; ".join(r.fail_reasons)]
            for r in reports]
    _write_csv(args.out, ["station_id", "frac_present", "n_good_neighbours", "passed", "fail_reasons"], rows)
    return 0


def cmd_bias_correct(args) -> int:
    dataset = io.load_dataset(args.stations, args.observations)
    lat, lon, params = io.read_grid(args.grid)
    coast = io.read_coastline(args.coastline) if args.coastline else None
    cal = calibrate(dataset, GridParamField.from_points(lat, lon, params), args.shape_model, args.scale_model, coast)
    leave = _classes(args.leave_uncorrected) if args.leave_uncorrected else frozenset()
    corrected = bias_correct(dataset, cal, leave)
    io.write_observations(dataset, args.out, {"corrected_ms": corrected.values})
    log.info("wrote %s", args.out)
    if args.calib_report:
        rows = []
        for sid in dataset.ids:
            sc = cal.stations[sid]
            m = sc.station_mle
            rows.append([sid, sc.station_class.value, "" if sc.dist_to_sea_km is None else float(sc.dist_to_sea_km),
                         sc.gwa.shape, sc.gwa.scale, sc.calibrated.shape, sc.calibrated.scale,
                         "" if m is None else m.shape, "" if m is None else m.scale])
        _write_csv(args.calib_report, ["station_id", "class", "dist_to_sea_km", "gwa_shape", "gwa_scale",
                                       "cal_shape", "cal_scale", "mle_shape", "mle_scale"], rows)
    return 0


def cmd_fit(args) -> int:
    cfg = io.read_config(args.config) if args.config else {}
    _, _, data, _ = load_model_inputs(args.stations, args.corrected, args.grid, cfg)
    spec = model_spec_from_config(cfg, args.variant)
    result = fit(data, spec)
    doc = {
        "model": result.to_dict(),
        "inputs": {
            "stations": [str(Path(args.stations).resolve()), sha256_file(args.stations)],
            "corrected": [str(Path(args.corrected).resolve()), sha256_file(args.corrected)],
            "grid": [str(Path(args.grid).resolve()), sha256_file(args.grid)],
        },
        "config": cfg,
        "config_hash": hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest(),
    }
    Path(args.out).write_text(json.dumps(doc, indent=2))
    log.info("wrote %s (log posterior %.3f)", args.out, result.log_posterior)
    return 0


def _read_targets(path, coast, cal, needs_covariate: bool):
    rows = io.read_table(path)
    targets, times = [], []
    for r in rows:
        la, lo = float(r["lat"]), float(r["lon"])
        dist = (r.get("dist_to_sea_km") or "").strip()
        d = float(dist) if dist else None
        if d is None and coast is not None:
            d = distance_to_coast_km(la, lo, *coast)
        x1 = None
        if needs_covariate:
            x1 = sqrt_weibull_mean(cal.params_at(la, lo, d)) if (d is not None or not cal.scale.uses_distance) \
                else None
        cls = StationClass.parse(r["class"]) if (r.get("class") or "").strip() else None
        targets.append(Target(r.get("id") or r.get("target_id") or f"t{len(targets)}", la, lo, x1, cls))
        times.append((r.get("timestamp") or "").strip())
    return targets, times


def cmd_predict(args) -> int:
    doc = json.loads(Path(args.fit).read_text())
    inputs = doc["inputs"]
    for key, (path, digest) in inputs.items():
        if sha256_file(path) != digest:
            raise ValidationError(f"input {key} ({path}) changed since fitting")
    cfg = doc.get("config", {})
    model = ModelFit.from_dict(doc["model"])
    dataset, cal, data, coast = load_model_inputs(inputs["stations"][0], inputs["corrected"][0],
                                                  inputs["grid"][0], cfg)
    targets, stamps = _read_targets(args.targets, coast, cal, model.covariate_used)
    index = {t: k for k, t in enumerate(dataset.times)}
    wanted = sorted({index[to_hour(s)] for s in stamps if s}) if any(stamps) else None
    if any(stamps) and not all(stamps):
        raise ValidationError("either every target row has a timestamp or none does")
    pr = predict(model, data, targets, wanted)
    rows = []
    for tg, t, when, mean, sd, mm in pr.rows():
        rows.append([tg.id, io.format_timestamp(dataset.times[t]), tg.lat, tg.lon, mean, sd, mm])
    _write_csv(args.out, ["target_id", "timestamp", "lat", "lon", "post_mean_sqrt", "post_sd_sqrt", "mean_ms"], rows)
    return 0


def cmd_losocv(args) -> int:
    cfg = io.read_config(args.config) if args.config else {}
    _, _, data, _ = load_model_inputs(args.stations, args.corrected, args.grid, cfg)
    specs = [parse_model_token(tok, cfg) for tok in args.models.split(",") if tok.strip()]
    rows = []
    for rep in losocv(data, specs, extremes=True):
        rows.append([rep.model_id, "ALL", rep.rmse, rep.crps_sqrt, sum(f.n for f in rep.folds if f.ok), ""])
        for f in rep.folds:
            rows.append([rep.model_id, f.station_id, f.rmse, f.crps, f.n, f.error])
        log.info("%s: rmse %.4f crps %.4f (%d failed folds)", rep.model_id, rep.rmse, rep.crps_sqrt,
                 len(rep.failures))
    _write_csv(args.out, ["model_id", "station_id", "rmse", "crps_sqrt", "n", "error"], rows)
    return 0


def cmd_evaluate(args) -> int:
    pred = io.read_table(args.pred)
    truth = io.read_observation_table(args.truth, args.value_column)
    pm, tm, mu, sd, ts = [], [], [], [], []
    for r in pred:
        sid = r.get("target_id") or r.get("station_id")
        t = to_hour(r["timestamp"])
        if sid not in truth or t not in truth[sid]:
            continue
        pm.append(float(r["mean_ms"]))
        tm.append(truth[sid][t])
        if r.get("post_sd_sqrt"):
            mu.append(float(r["post_mean_sqrt"]))
            sd.append(float(r["post_sd_sqrt"]))
            ts.append(math.sqrt(truth[sid][t]))
    if not pm:
        raise ValidationError("no prediction rows match the truth table")
    rows = [["rmse", "", rmse(pm, tm), len(pm)]]
    if len(sd) == len(pm) and all(s > 0 for s in sd):
        rows.append(["crps_sqrt", "", float(np.mean(crps_gaussian(mu, sd, ts))), len(pm)])
    if len(pm) >= 100:
        for q, m in extreme_metrics(pm, tm).items():
            rows += [[f"top{q:g}_rmse", q, m.rmse, m.n], [f"top{q:g}_bias", q, m.bias, m.n],
                     [f"top{q:g}_pearson_r", q, m.pearson_r, m.n]]
    _write_csv(args.out, ["metric", "percentile", "value", "n"], rows)
    return 0


_SIM_FIELDS = {f.name: f.type for f in fields(SimulationConfig)}


def sim_config_from(cfg: dict) -> SimulationConfig:
    kw = {}
    for key, value in cfg.items():
        if key not in _SIM_FIELDS or key in ("layout", "junk_group"):
            continue
        if key in ("n_met", "n_pws1", "n_pws2", "T", "seed"):
            kw[key] = int(value)
        else:
            kw[key] = float(value)
    if cfg.get("junk_group"):
        kw["junk_group"] = frozenset(s.strip() for s in cfg["junk_group"].split(","))
    if cfg.get("layout"):
        kw["layout"] = tuple(io.read_stations(cfg["layout"]))
    return SimulationConfig(**kw)


def cmd_simulate(args) -> int:
    cfg = io.read_config(args.config) if args.config else {}
    sim = simulate(sim_config_from(cfg))
    obs_path, st_path = args.out
    times = sim.to_gp_data().times
    rows = [[sid, io.format_timestamp(times[t]), float(sim.y[t, j]), float(sim.z[t, j])]
            for j, sid in enumerate(sim.ids) for t in range(sim.y.shape[0])]
    _write_csv(obs_path, ["station_id", "timestamp", "value", "latent"], rows)
    io.write_stations(sim.stations, st_path)
    log.info("wrote %s", st_path)
    return 0


def cmd_sim_study(args) -> int:
    cfg = io.read_config(args.config) if args.config else {}
    levels = tuple(float(v) for v in cfg.get("noise_levels", "0.3,0.4,0.5").split(","))
    variants = tuple(v.strip() for v in cfg.get("variants", "igp,ar1").split(","))
    strategies = tuple(v.strip() for v in cfg.get("strategies", ",".join(STRATEGIES)).split(","))
    n_reps = int(cfg.get("n_reps", 20))
    base = sim_config_from(cfg)

    def progress(row):
        log.info("rep %d noise %.2f %s/%s rmse %.4f", row.rep, row.noise, row.variant, row.strategy, row.rmse)

    summary = summarise_study(run_simulation_study(levels, variants, strategies, n_reps, base, progress=progress))
    t9, t10 = args.out
    _write_csv(t9, ["variant", "noise", "strategy", "rmse", "crps", "n_reps", "n_failed"],
               [[r["variant"], r["noise"], r["strategy"], r["rmse"], r["crps"], r["n_reps"], r["n_failed"]]
                for r in summary])
    keys = sorted({k for r in summary for k in r if k.startswith("sigma_") and k != "sigma_z"})
    _write_csv(t10, ["variant", "noise", "strategy", "phi", "sigma_z", "rho"] + keys,
               [[r["variant"], r["noise"], r["strategy"], r["phi"], r["sigma_z"], r["rho"]]
                + [r.get(k, float("nan")) for k in keys] for r in summary])
    return 0


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crowdwind", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("fit-dist", help="fit Weibull, gamma and log-normal per station")
    s.add_argument("--observations", required=True)
    s.add_argument("--value-column", default="wind_speed_ms")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_dist)

    s = sub.add_parser("qc", help="screen personal stations")
    s.add_argument("--stations", required=True)
    s.add_argument("--observations", required=True)
    s.add_argument("--min-neighbours", type=int, default=5)
    s.add_argument("--rho-min", type=float, default=0.5)
    s.add_argument("--missing-threshold", type=float, default=0.9)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_qc)

    s = sub.add_parser("bias-correct", help="calibrate the grid field and quantile-map personal stations")
    s.add_argument("--stations", required=True)
    s.add_argument("--observations", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--coastline")
    s.add_argument("--shape-model", default="linear")
    s.add_argument("--scale-model", default="spline+dist")
    s.add_argument("--leave-uncorrected", default="", help="comma-separated classes to pass through raw")
    s.add_argument("--out", required=True)
    s.add_argument("--calib-report")
    s.set_defaults(func=cmd_bias_correct)

    s = sub.add_parser("fit", help="fit the spatio-temporal model")
    s.add_argument("--variant", choices=("igp", "ar1"))
    s.add_argument("--corrected", required=True)
    s.add_argument("--stations", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("predict", help="predict at target sites from a fitted model")
    s.add_argument("--fit", required=True)
    s.add_argument("--targets", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("losocv", help="leave-one-MET-station-out cross-validation")
    s.add_argument("--corrected", required=True)
    s.add_argument("--stations", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--models", required=True, help="comma list of variant-strategy, e.g. igp-met,igp-grouped")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_losocv)

    s = sub.add_parser("evaluate", help="score predictions against observations")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--value-column", default="wind_speed_ms")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("simulate", help="draw one synthetic data set")
    s.add_argument("--config")
    s.add_argument("--out", nargs=2, required=True, metavar=("OBS_CSV", "STATIONS_CSV"))
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sim-study", help="run the three-strategy simulation study")
    s.add_argument("--config")
    s.add_argument("--out", nargs=2, required=True, metavar=("SCORES_CSV", "PARAMS_CSV"))
    s.set_defaults(func=cmd_sim_study)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValidationError, FitError, QcError, CalibrationError, ValueError, OSError, KeyError) as exc:
        print(f"crowdwind {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
