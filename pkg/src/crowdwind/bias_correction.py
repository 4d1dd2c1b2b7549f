"""Quantile-mapping bias correction toward calibrated gridded Weibull fields.

The chain is: interpolate the gridded (k, lam) field to every station by
inverse distance weighting, regress station-MLE parameters at MET sites on
the interpolated ones (shape: linear; scale: penalised spline plus a linear
distance-to-sea term), predict calibrated parameters at personal stations,
and map each personal station's empirical percentiles through the inverse
Weibull CDF.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, stats
from scipy.interpolate import BSpline

from .core import Dataset, StationClass, StationRecord, ValidationError, WeibullParams, WindSeries, haversine_km
from .distributions import (
    FitError,
    empirical_quantile,
    fit_weibull,
    weibull_mean,
    weibull_quantile,
    weibull_variance,
)
from .quality_control import QcError

EXACT_HIT_KM = 1e-3


class CalibrationError(ValueError):
    pass


# ---- gridded field and IDW ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class GridParamField:
    lat: np.ndarray
    lon: np.ndarray
    shape: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        lat = np.asarray(self.lat, float)
        lon = np.asarray(self.lon, float)
        k = np.asarray(self.shape, float)
        lam = np.asarray(self.scale, float)
        if lat.size == 0:
            raise ValidationError("grid field is empty")
        if not (lat.shape == lon.shape == k.shape == lam.shape):
            raise ValidationError("grid arrays must have equal length")
        if not (np.all(np.isfinite(k)) and np.all(k > 0) and np.all(np.isfinite(lam)) and np.all(lam > 0)):
            raise ValidationError("grid Weibull parameters must be finite and > 0")
        if len({(a, b) for a, b in zip(lat.tolist(), lon.tolist())}) != lat.size:
            raise ValidationError("duplicate grid coordinates")
        for name, arr in (("lat", lat), ("lon", lon), ("shape", k), ("scale", lam)):
            object.__setattr__(self, name, arr)

    @classmethod
    def from_points(cls, lat, lon, params: Sequence[WeibullParams]) -> "GridParamField":
        return cls(np.asarray(lat, float), np.asarray(lon, float),
                   np.array([p.shape for p in params]), np.array([p.scale for p in params]))

    def __len__(self) -> int:
        return self.lat.size

    def params(self, i: int) -> WeibullParams:
        return WeibullParams(float(self.shape[i]), float(self.scale[i]))


def idw_weights(distances_km: np.ndarray, power: float = 2.0) -> np.ndarray:
    w = np.asarray(distances_km, float) ** (-power)
    return w / w.sum()


def idw_interpolate(
    field_: GridParamField, lat: float, lon: float, power: float = 2.0, k_nearest: int = 4
) -> WeibullParams:
    """Inverse-distance weighted shape and scale from the nearest grid points."""
    d = haversine_km(lat, lon, field_.lat, field_.lon)
    k = min(k_nearest, d.size)
    near = np.argsort(d, kind="stable")[:k]
    if d[near[0]] < EXACT_HIT_KM:
        return field_.params(int(near[0]))
    w = idw_weights(d[near], power)
    return WeibullParams(float(w @ field_.shape[near]), float(w @ field_.scale[near]))


def distance_to_coast_km(lat: float, lon: float, coast_lat, coast_lon, spacing_km: float = 1.0) -> float:
    """Minimum Haversine distance to a coastline polyline.

    Segments are densified to roughly ``spacing_km`` before taking the
    vertex minimum.
    """
    cl, co = np.asarray(coast_lat, float), np.asarray(coast_lon, float)
    if cl.size == 0:
        raise ValidationError("empty coastline")
    pts_lat, pts_lon = [cl[:1]], [co[:1]]
    for i in range(1, cl.size):
        seg = float(haversine_km(cl[i - 1], co[i - 1], cl[i], co[i]))
        m = max(1, int(math.ceil(seg / spacing_km)))
        f = np.arange(1, m + 1) / m
        pts_lat.append(cl[i - 1] + f * (cl[i] - cl[i - 1]))
        pts_lon.append(co[i - 1] + f * (co[i] - co[i - 1]))
    return float(haversine_km(lat, lon, np.concatenate(pts_lat), np.concatenate(pts_lon)).min())


# ---- penalised regression spline --------------------------------------------

def _clamped_knots(lo: float, hi: float, n_basis: int, degree: int = 3) -> np.ndarray:
    n_inner = n_basis - degree - 1
    if n_inner < 0:
        raise ValueError("too few basis functions for the spline degree")
    inner = np.linspace(lo, hi, n_inner + 2)[1:-1]
    return np.concatenate([np.full(degree + 1, lo), inner, np.full(degree + 1, hi)])


def _curvature_penalty(knots: np.ndarray, degree: int = 3) -> np.ndarray:
    """Gram matrix of second derivatives, ``int B_i'' B_j'' dx``.

    Its null space is exactly the linear functions, so heavy smoothing
    shrinks toward a straight line rather than toward a constant.
    """
    n = len(knots) - degree - 1
    nodes, weights = np.polynomial.legendre.leggauss(degree + 1)
    breaks = np.unique(knots)
    pen = np.zeros((n, n))
    for a, b in zip(breaks[:-1], breaks[1:]):
        x = 0.5 * (b - a) * nodes + 0.5 * (a + b)
        d2 = np.stack([BSpline(knots, np.eye(n)[i], degree).derivative(2)(x) for i in range(n)], axis=1)
        pen += (d2 * (0.5 * (b - a) * weights)[:, None]).T @ d2
    return pen


@dataclass(frozen=True, eq=False)
class PenalizedSpline:
    """Cubic B-spline ``s(x)`` with linear continuation outside the knot span."""

    knots: np.ndarray
    coef: np.ndarray
    smoothing: float
    degree: int = 3

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return (spline_basis(self.knots, x.ravel(), self.degree) @ self.coef).reshape(x.shape)

    def basis(self, x) -> np.ndarray:
        return spline_basis(self.knots, x, self.degree)


def spline_basis(knots: np.ndarray, x, degree: int = 3) -> np.ndarray:
    """Design matrix with linear extension of each basis function beyond the span."""
    x = np.asarray(x, float)
    n = len(knots) - degree - 1
    lo, hi = knots[0], knots[-1]
    out = np.empty((x.size, n))
    eye = np.eye(n)
    for i in range(n):
        b = BSpline(knots, eye[i], degree)
        db = b.derivative(1)
        xi = np.clip(x, lo, hi)
        v = b(xi)
        v = np.where(x < lo, b(lo) + db(lo) * (x - lo), v)
        v = np.where(x > hi, b(hi) + db(hi) * (x - hi), v)
        out[:, i] = v
    return out


def _penalized_solve(X, y, pen_full, lam):
    a = X.T @ X + lam * pen_full
    coef = np.linalg.solve(a, X.T @ y)
    hat_trace = np.trace(np.linalg.solve(a, X.T @ X))
    resid = y - X @ coef
    return coef, float(resid @ resid), float(hat_trace)


def fit_penalized(X, y, pen_full, smoothing: float | None = None):
    """Penalised least squares with the smoothing parameter chosen by GCV.

    Returns ``(coef, smoothing, edf, rss)``. ``pen_full`` is the penalty
    embedded in the full coefficient space (zeros for unpenalised columns).
    """
    n = y.size

    def gcv(log_lam):
        _, rss, tr = _penalized_solve(X, y, pen_full, math.exp(log_lam))
        denom = (n - tr) ** 2
        return n * rss / denom if denom > 0 else math.inf

    if smoothing is None:
        grid = np.linspace(-12.0, 12.0, 49)
        try:
            scores = np.array([gcv(g) for g in grid])
            if not np.any(np.isfinite(scores)):
                raise FloatingPointError("GCV not finite")
            best = int(np.nanargmin(np.where(np.isfinite(scores), scores, np.nan)))
            lo, hi = grid[max(best - 1, 0)], grid[min(best + 1, grid.size - 1)]
            res = optimize.minimize_scalar(gcv, bounds=(lo, hi), method="bounded", options={"xatol": 1e-6})
            log_lam = float(res.x) if res.fun <= scores[best] else float(grid[best])
            smoothing = math.exp(log_lam)
        except (FloatingPointError, np.linalg.LinAlgError):
            warnings.warn("GCV failed; using the fixed mid-range smoothing parameter 1.0", RuntimeWarning,
                          stacklevel=2)
            smoothing = 1.0
    coef, rss, edf = _penalized_solve(X, y, pen_full, smoothing)
    return coef, smoothing, edf, rss


# ---- calibration models ------------------------------------------------------

SHAPE_MODELS = ("identity", "linear")
SCALE_MODELS = ("identity", "linear", "linear+dist", "spline", "spline+dist")


@dataclass(frozen=True)
class ShapeCalibration:
    beta0: float
    beta1: float
    sigma: float
    model: str = "linear"

    def predict(self, k_gwa):
        k_gwa = np.asarray(k_gwa, float)
        if self.model == "identity":
            return k_gwa.copy()
        return self.beta0 + self.beta1 * k_gwa


@dataclass(frozen=True, eq=False)
class ScaleCalibration:
    """``lam = beta0 + s(lam_gwa) + beta1_dist * dist`` (terms per ``model``).

    For linear models ``s`` is ``beta1_gwa * lam_gwa``; for spline models the
    smooth is centred so that its mean over the training points is zero.
    """

    beta0: float
    spline: PenalizedSpline | None
    beta1_dist: float
    sigma: float
    model: str = "spline+dist"
    beta1_gwa: float = 0.0

    @property
    def uses_distance(self) -> bool:
        return self.model.endswith("+dist")

    def smooth(self, lam_gwa):
        lam_gwa = np.asarray(lam_gwa, float)
        if self.spline is not None:
            return self.spline(lam_gwa)
        return self.beta1_gwa * lam_gwa

    def predict(self, lam_gwa, dist_km=None):
        lam_gwa = np.asarray(lam_gwa, float)
        if self.model == "identity":
            return lam_gwa.copy()
        out = self.beta0 + self.smooth(lam_gwa)
        if self.uses_distance:
            if dist_km is None:
                raise CalibrationError("distance to sea required by this scale model")
            out = out + self.beta1_dist * np.asarray(dist_km, float)
        return out


def _check_design(x, what):
    x = np.asarray(x, float)
    if np.ptp(x) == 0:
        raise CalibrationError(f"degenerate design: constant {what}")


def fit_shape_calibration(pairs: Sequence[tuple[float, float]], model: str = "linear") -> ShapeCalibration:
    """OLS of station shape on gridded shape from ``(k_gwa, k_met)`` pairs."""
    if model not in SHAPE_MODELS:
        raise ValueError(f"unknown shape model {model!r}")
    arr = np.asarray(pairs, float).reshape(-1, 2)
    if len(arr) < 3:
        raise CalibrationError("need at least 3 stations for the shape calibration")
    x, y = arr[:, 0], arr[:, 1]
    if model == "identity":
        r = y - x
        return ShapeCalibration(0.0, 1.0, float(np.sqrt(np.mean(r ** 2))), model)
    _check_design(x, "shape regressor")
    X = np.column_stack([np.ones_like(x), x])
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ beta
    dof = max(len(y) - 2, 1)
    return ShapeCalibration(float(beta[0]), float(beta[1]), float(np.sqrt(r @ r / dof)), model)


def fit_scale_calibration(
    rows: Sequence[tuple[float, float, float]],
    model: str = "spline+dist",
    n_basis: int = 6,
    smoothing: float | None = None,
) -> ScaleCalibration:
    """Fit ``lam_met`` from ``(lam_gwa, dist_to_sea_km, lam_met)`` rows."""
    if model not in SCALE_MODELS:
        raise ValueError(f"unknown scale model {model!r}")
    arr = np.asarray(rows, float).reshape(-1, 3)
    x, dist, y = arr[:, 0], arr[:, 1], arr[:, 2]
    if model == "identity":
        r = y - x
        return ScaleCalibration(0.0, None, 0.0, float(np.sqrt(np.mean(r ** 2))), model, 1.0)
    use_dist = model.endswith("+dist")
    if model.startswith("spline") and len(arr) < 8:
        raise CalibrationError("need at least 8 stations for the spline scale calibration")
    if len(arr) < 3:
        raise CalibrationError("need at least 3 stations for the scale calibration")
    _check_design(x, "scale regressor")
    if use_dist:
        _check_design(dist, "distance to sea")
    if not np.all(np.isfinite(arr)):
        raise CalibrationError("non-finite calibration input (missing distance to sea?)")

    if model.startswith("linear"):
        cols = [np.ones_like(x), x] + ([dist] if use_dist else [])
        X = np.column_stack(cols)
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
        r = y - X @ beta
        dof = max(len(y) - X.shape[1], 1)
        return ScaleCalibration(float(beta[0]), None, float(beta[2]) if use_dist else 0.0,
                                float(np.sqrt(r @ r / dof)), model, float(beta[1]))

    knots = _clamped_knots(float(x.min()), float(x.max()), n_basis)
    B = spline_basis(knots, x)
    pen = _curvature_penalty(knots)
    X = np.column_stack([B, dist]) if use_dist else B
    pen_full = np.zeros((X.shape[1], X.shape[1]))
    pen_full[:n_basis, :n_basis] = pen
    # scale the penalty so the smoothing grid is unit-free
    pen_full *= np.trace(B.T @ B) / max(np.trace(pen), 1e-300)
    coef, lam, edf, rss = fit_penalized(X, y, pen_full, smoothing)
    spline_coef = coef[:n_basis]
    s_vals = B @ spline_coef
    beta0 = float(s_vals.mean())
    # B-splines sum to one, so a constant shift of every coefficient shifts s by that constant
    spline = PenalizedSpline(knots, spline_coef - beta0, lam)
    dof = max(len(y) - edf, 1.0)
    return ScaleCalibration(beta0, spline, float(coef[n_basis]) if use_dist else 0.0,
                            float(math.sqrt(rss / dof)), model)


def leave_one_out_calibration(
    rows: Sequence[tuple[float, float, float, float, float]],
    shape_models: Sequence[str] = SHAPE_MODELS,
    scale_models: Sequence[str] = SCALE_MODELS,
) -> dict[str, dict[str, float]]:
    """Leave-one-station-out RMSE for every candidate calibration model.

    Each row is ``(k_gwa, k_met, lam_gwa, dist_km, lam_met)``. Returns
    ``{"shape": {model: rmse}, "scale": {model: rmse}}``.
    """
    arr = np.asarray(rows, float).reshape(-1, 5)
    n = len(arr)
    if n < 4:
        raise CalibrationError("need at least 4 stations for leave-one-out calibration")
    out: dict[str, dict[str, float]] = {"shape": {}, "scale": {}}
    for m in shape_models:
        err = []
        for i in range(n):
            tr = np.delete(arr, i, axis=0)
            cal = fit_shape_calibration(tr[:, [0, 1]], m)
            err.append(float(cal.predict(arr[i, 0])) - arr[i, 1])
        out["shape"][m] = float(np.sqrt(np.mean(np.square(err))))
    for m in scale_models:
        err = []
        for i in range(n):
            tr = np.delete(arr, i, axis=0)
            cal = fit_scale_calibration(tr[:, [2, 3, 4]], m)
            err.append(float(cal.predict(arr[i, 2], arr[i, 3])) - arr[i, 4])
        out["scale"][m] = float(np.sqrt(np.mean(np.square(err))))
    return out


# ---- quantile mapping --------------------------------------------------------

MIN_PERCENTILE_SAMPLE = 10


def _series_arrays(series) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(series, WindSeries):
        return np.asarray(series.values, float), np.asarray(series.present, bool)
    values, present = series
    return np.asarray(values, float), np.asarray(present, bool)


def empirical_percentiles(series) -> np.ndarray:
    """Hazen plotting positions ``(rank - 0.5) / n`` with averaged ties.

    Missing hours stay NaN. The largest value maps strictly below 1, so every
    percentile is transformable.
    """
    values, present = _series_arrays(series)
    obs = values[present]
    if obs.size < MIN_PERCENTILE_SAMPLE:
        raise QcError(f"need at least {MIN_PERCENTILE_SAMPLE} present values")
    if np.all(obs == obs[0]):
        raise QcError("degenerate ranks")
    out = np.full(values.shape, np.nan)
    out[present] = (stats.rankdata(obs, method="average") - 0.5) / obs.size
    return out


@dataclass(frozen=True, eq=False)
class CorrectedSeries:
    station_id: str
    percentiles: np.ndarray
    corrected: np.ndarray
    present: np.ndarray
    params: WeibullParams


def correct_series(series, params: WeibullParams, station_id: str | None = None) -> CorrectedSeries:
    values, present = _series_arrays(series)
    p = empirical_percentiles((values, present))
    corrected = np.full(values.shape, np.nan)
    corrected[present] = weibull_quantile(p[present], params)
    sid = station_id or getattr(series, "station_id", "")
    return CorrectedSeries(sid, p, corrected, present.copy(), params)


# ---- validation of calibrated distributions ---------------------------------

@dataclass(frozen=True)
class MetricAgreement:
    metric: str
    mae: float
    pearson_r: float | None


def validate_calibrated_distributions(
    samples: Mapping[str, Sequence[float]], params: Mapping[str, WeibullParams]
) -> list[MetricAgreement]:
    """Empirical mean, variance and 95th percentile against Weibull-implied values."""
    ids = [s for s in samples if s in params]
    if not ids:
        raise CalibrationError("no stations with both a sample and parameters")
    emp = {"mean": [], "variance": [], "p95": []}
    imp = {"mean": [], "variance": [], "p95": []}
    for sid in ids:
        x = np.asarray(samples[sid], float)
        par = params[sid]
        emp["mean"].append(x.mean())
        emp["variance"].append(x.var(ddof=1) if x.size > 1 else 0.0)
        emp["p95"].append(empirical_quantile(x, 0.95))
        imp["mean"].append(weibull_mean(par))
        imp["variance"].append(weibull_variance(par))
        imp["p95"].append(float(weibull_quantile(0.95, par)))
    out = []
    for m in ("mean", "variance", "p95"):
        a, b = np.asarray(emp[m]), np.asarray(imp[m])
        mae = float(np.mean(np.abs(a - b)))
        r = None
        if a.size >= 2 and a.std() > 0 and b.std() > 0:
            r = float(np.corrcoef(a, b)[0, 1])
        out.append(MetricAgreement(m, mae, r))
    return out


# ---- end-to-end ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StationCalibration:
    station_id: str
    station_class: StationClass
    dist_to_sea_km: float | None
    gwa: WeibullParams
    calibrated: WeibullParams
    station_mle: WeibullParams | None = None


@dataclass(frozen=True, eq=False)
class Calibration:
    field: GridParamField
    shape: ShapeCalibration
    scale: ScaleCalibration
    idw_power: float = 2.0
    idw_k: int = 4
    stations: dict[str, StationCalibration] = field(default_factory=dict)

    def gwa_at(self, lat: float, lon: float) -> WeibullParams:
        return idw_interpolate(self.field, lat, lon, self.idw_power, self.idw_k)

    def params_at(self, lat: float, lon: float, dist_to_sea_km: float | None) -> WeibullParams:
        g = self.gwa_at(lat, lon)
        k = float(self.shape.predict(g.shape))
        lam = float(self.scale.predict(g.scale, dist_to_sea_km))
        if not (k > 0 and lam > 0):
            raise CalibrationError(f"calibrated parameters not positive at ({lat}, {lon}): k={k}, lam={lam}")
        return WeibullParams(k, lam)


def resolve_distances(
    stations: Sequence[StationRecord], coastline: tuple[np.ndarray, np.ndarray] | None = None
) -> dict[str, float | None]:
    out = {}
    for st in stations:
        if st.dist_to_sea_km is not None:
            out[st.id] = st.dist_to_sea_km
        elif coastline is not None:
            out[st.id] = distance_to_coast_km(st.lat, st.lon, *coastline)
        else:
            out[st.id] = None
    return out


def calibrate(
    dataset: Dataset,
    field_: GridParamField,
    shape_model: str = "linear",
    scale_model: str = "spline+dist",
    coastline: tuple[np.ndarray, np.ndarray] | None = None,
    idw_power: float = 2.0,
    idw_k: int = 4,
) -> Calibration:
    """Fit the grid-to-station calibration on MET stations and apply it everywhere."""
    dists = resolve_distances(dataset.stations, coastline)
    gwa = {st.id: idw_interpolate(field_, st.lat, st.lon, idw_power, idw_k) for st in dataset.stations}
    met = [st for st in dataset.stations if st.station_class is StationClass.MET]
    mle: dict[str, WeibullParams] = {}
    for st in met:
        j = dataset.index(st.id)
        try:
            mle[st.id] = fit_weibull(dataset.values[dataset.present[:, j], j])
        except FitError as exc:
            warnings.warn(f"MET station {st.id} skipped in calibration: {exc}", RuntimeWarning, stacklevel=2)
    used = [st for st in met if st.id in mle]
    shape = fit_shape_calibration([(gwa[s.id].shape, mle[s.id].shape) for s in used], shape_model)
    needs_dist = scale_model.endswith("+dist")
    if needs_dist and any(dists[s.id] is None for s in used):
        raise CalibrationError("distance to sea missing for a MET station; supply dist_to_sea_km or a coastline")
    scale = fit_scale_calibration(
        [(gwa[s.id].scale, dists[s.id] if dists[s.id] is not None else 0.0, mle[s.id].scale) for s in used],
        scale_model,
    )
    cal = Calibration(field_, shape, scale, idw_power, idw_k)
    for st in dataset.stations:
        d = dists[st.id]
        if needs_dist and d is None:
            raise CalibrationError(f"distance to sea missing for station {st.id}")
        g = gwa[st.id]
        k = float(shape.predict(g.shape))
        lam = float(scale.predict(g.scale, d))
        if not (k > 0 and lam > 0):
            raise CalibrationError(f"calibrated parameters not positive at station {st.id}")
        cal.stations[st.id] = StationCalibration(st.id, st.station_class, d, g, WeibullParams(k, lam),
                                                 mle.get(st.id))
    return cal


def bias_correct(
    dataset: Dataset, calibration: Calibration, leave_uncorrected: frozenset[StationClass] | set = frozenset()
) -> Dataset:
    """Quantile-map every personal station; MET and ``leave_uncorrected`` classes pass through."""
    values = dataset.values.copy()
    for j, st in enumerate(dataset.stations):
        if st.station_class is StationClass.MET or st.station_class in leave_uncorrected:
            continue
        params = calibration.stations[st.id].calibrated
        cs = correct_series((dataset.values[:, j], dataset.present[:, j]), params, st.id)
        values[:, j] = cs.corrected
    return dataset.with_values(values)


__all__ = [
    "Calibration", "CalibrationError", "CorrectedSeries", "GridParamField", "MetricAgreement",
    "PenalizedSpline", "ScaleCalibration", "ShapeCalibration", "StationCalibration", "bias_correct",
    "calibrate", "correct_series", "distance_to_coast_km", "empirical_percentiles", "fit_penalized",
    "fit_scale_calibration", "fit_shape_calibration", "idw_interpolate", "idw_weights",
    "leave_one_out_calibration", "resolve_distances", "spline_basis", "validate_calibrated_distributions",
]
