"""Scores, leave-one-station-out cross-validation and robustness experiments."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats

from .core import StationClass, ValidationError
from .gp.model import (
    FitError,
    GpData,
    ModelFit,
    ModelSpec,
    Target,
    fit,
    predict,
)
from .gp.priors import DEFAULT_PRIORS, PriorSet
from .gp.covariance import CovarianceError

EXTREME_PERCENTILES = (1.0, 2.5, 5.0)
_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, float).ravel()
    t = np.asarray(truth, float).ravel()
    if p.size != t.size:
        raise ValidationError("length mismatch")
    if p.size == 0:
        raise ValidationError("empty input")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(t))):
        raise ValidationError("pairs must be present (finite)")
    return p, t


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def crps_gaussian(mu, sigma, y):
    """Closed-form CRPS of ``N(mu, sigma^2)`` at ``y``; broadcasts."""
    mu, sigma, y = np.broadcast_arrays(*(np.asarray(a, float) for a in (mu, sigma, y)))
    if np.any(~(sigma > 0)):
        raise ValidationError("sigma must be positive")
    z = (y - mu) / sigma
    out = sigma * (z * (2.0 * stats.norm.cdf(z) - 1.0) + 2.0 * stats.norm.pdf(z) - _INV_SQRT_PI)
    return float(out) if out.ndim == 0 else out


def crps_discretized(cdf: Callable, y_obs: float, lo: float, hi: float, m: int = 10_000) -> float:
    """Riemann sum of ``(F(x) - 1{x >= y})^2`` over ``m`` equal cells of ``[lo, hi]`` (midpoints)."""
    if m < 100:
        raise ValidationError("need at least 100 intervals")
    if not lo < y_obs < hi:
        raise ValidationError("observation outside grid")
    dx = (hi - lo) / m
    x = lo + dx * (np.arange(m) + 0.5)
    F = np.asarray(cdf(x), float)
    return float(np.sum((F - (x >= y_obs)) ** 2) * dx)


@dataclass(frozen=True)
class ExtremeMetric:
    rmse: float
    bias: float
    pearson_r: float
    n: int


def extreme_metrics(pred, truth, percentiles: Sequence[float] = EXTREME_PERCENTILES) -> dict[float, ExtremeMetric]:
    """Scores on the pairs whose truth exceeds its ``100 - q`` percentile; bias is ``pred - truth``."""
    p, t = _pair(pred, truth)
    if p.size < 100:
        raise ValidationError("need at least 100 pairs")
    out = {}
    for q in sorted(percentiles):
        sel = t > np.percentile(t, 100.0 - q)
        if sel.sum() < 3:
            warnings.warn(f"top {q}% subset has fewer than 3 pairs; skipped", stacklevel=2)
            continue
        ps, ts = p[sel], t[sel]
        r = float(np.corrcoef(ps, ts)[0, 1]) if ps.std() > 0 and ts.std() > 0 else float("nan")
        out[q] = ExtremeMetric(rmse(ps, ts), float(np.mean(ps - ts)), r, int(sel.sum()))
    return out


# --------------------------------------------------------------------------- LOSOCV

@dataclass(frozen=True)
class FoldResult:
    station_id: str
    ok: bool
    rmse: float = float("nan")
    crps: float = float("nan")
    n: int = 0
    error: str = ""
    hyper: object = None


@dataclass
class ScoreReport:
    model_id: str
    rmse: float
    crps_sqrt: float
    per_station: dict[str, tuple[float, float]]
    extreme: dict[float, ExtremeMetric] = field(default_factory=dict)
    folds: list[FoldResult] = field(default_factory=list)
    full_fit: ModelFit | None = None
    pred_ms: np.ndarray | None = None
    truth_ms: np.ndarray | None = None

    @property
    def complete(self) -> bool:
        return all(f.ok for f in self.folds)

    @property
    def failures(self) -> list[FoldResult]:
        return [f for f in self.folds if not f.ok]


def _to_ms(values: np.ndarray, transform: str) -> np.ndarray:
    return values ** 2 if transform == "sqrt" else values


def losocv(
    data: GpData,
    specs: Sequence[ModelSpec],
    held_out_class: StationClass = StationClass.MET,
    priors: PriorSet = DEFAULT_PRIORS,
    warm_start: bool = True,
    full_fits: Mapping[str, ModelFit] | None = None,
    extremes: bool = False,
) -> list[ScoreReport]:
    """Leave each ``held_out_class`` station out in turn, refit, predict it, score.

    RMSE is on the wind-speed scale (the back-transformed mean against the
    observed speed); CRPS is on the model scale with the Gaussian predictive
    distribution of latent field plus the held-out station's nugget. Folds are
    warm-started from the all-station fit and skip the Laplace step. A failing
    fold is recorded and left out of the aggregate.
    """
    held = [i for i, c in enumerate(data.classes) if c is held_out_class and data.mask[:, i].any()]
    if len(held) < 3:
        raise ValidationError(f"need at least 3 {held_out_class.value} stations to cross-validate")
    reports = []
    for k, spec in enumerate(specs):
        model_id = spec.name or f"model{k + 1}"
        full = (full_fits or {}).get(model_id)
        if full is None:
            full = fit(data, spec, priors)
        folds, preds, truths, crpss = [], [], [], []
        for i in held:
            sid = data.ids[i]
            train = data.drop_site(sid)
            try:
                f = fit(train, spec, priors, init=full.hyper if warm_start else None, laplace=False,
                        init_hessian=full.hessian)
                times = np.flatnonzero(data.mask[:, i])
                x1 = None if data.x1 is None else float(data.x1[i])
                tg = Target(sid, float(data.lat[i]), float(data.lon[i]), x1, data.classes[i])
                pr = predict(f, train, [tg], times, priors)
            except (FitError, CovarianceError, ValidationError, np.linalg.LinAlgError) as exc:
                folds.append(FoldResult(sid, False, error=str(exc)))
                continue
            obs = data.y[times, i]
            pm = pr.mean_ms[:, 0]
            tm = _to_ms(obs, spec.transform)
            psd = pr.predictive_sd()[:, 0]
            c = crps_gaussian(pr.mean[:, 0], np.maximum(psd, 1e-12), obs)
            folds.append(FoldResult(sid, True, rmse(pm, tm), float(np.mean(c)), times.size, hyper=f.hyper))
            preds.append(pm)
            truths.append(tm)
            crpss.append(c)
        if preds:
            P, Tr, Cc = np.concatenate(preds), np.concatenate(truths), np.concatenate(crpss)
            rep = ScoreReport(model_id, rmse(P, Tr), float(np.mean(Cc)),
                              {f.station_id: (f.rmse, f.crps) for f in folds if f.ok},
                              folds=folds, full_fit=full, pred_ms=P, truth_ms=Tr)
            if extremes and P.size >= 100:
                rep.extreme = extreme_metrics(P, Tr)
        else:
            rep = ScoreReport(model_id, float("nan"), float("nan"), {}, folds=folds, full_fit=full)
        reports.append(rep)
    return reports


# --------------------------------------------------------------------------- robustness

@dataclass
class UncorrectedGroupResult:
    clean: dict[str, ScoreReport]
    raw: dict[str, ScoreReport]
    group: StationClass

    def degradation(self, nugget: str) -> float:
        return self.raw[nugget].rmse - self.clean[nugget].rmse

    def hyper_table(self) -> list[dict]:
        rows = []
        for label, reps in (("clean", self.clean), ("raw", self.raw)):
            for nugget, rep in reps.items():
                h = rep.full_fit.hyper
                row = {"run": label, "nugget": nugget, "rmse": rep.rmse, "crps": rep.crps_sqrt,
                       "phi": h.phi, "sigma_z": h.sigma_z}
                row.update({f"sigma_{g}": v for g, v in h.group_sd.items()})
                rows.append(row)
        return rows


def uncorrected_group_experiment(
    corrected: GpData,
    uncorrected: GpData,
    group: StationClass = StationClass.U,
    base_spec: ModelSpec = ModelSpec(),
    priors: PriorSet = DEFAULT_PRIORS,
) -> UncorrectedGroupResult:
    """LOSOCV of pooled and grouped nuggets with ``group`` corrected vs left raw.

    ``uncorrected`` is the same data set with the ``group`` stations' values
    not bias corrected (or otherwise degraded).
    """
    if group not in uncorrected.classes:
        raise ValidationError(f"data contain no {group.value} stations")
    specs = [replace(base_spec, nugget="pooled", name="pooled"), replace(base_spec, nugget="grouped", name="grouped")]
    clean = {r.model_id: r for r in losocv(corrected, specs, priors=priors)}
    raw = {r.model_id: r for r in losocv(uncorrected, specs, priors=priors)}
    return UncorrectedGroupResult(clean, raw, group)


__all__ = [
    "EXTREME_PERCENTILES", "ExtremeMetric", "FoldResult", "ScoreReport", "UncorrectedGroupResult",
    "crps_discretized", "crps_gaussian", "extreme_metrics", "losocv", "rmse", "uncorrected_group_experiment",
]
