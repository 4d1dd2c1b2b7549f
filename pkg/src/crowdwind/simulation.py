"""Synthetic separable Matérn x AR(1) data with grouped noise and a junk group.

The generator works directly on the Gaussian (square-root) scale. Standard
normal draws for the field and for the noise are taken before scaling, so
configurations that differ only in noise levels share their random numbers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import linalg

from .core import HOUR, Dataset, StationClass, StationRecord, ValidationError, distance_matrix, to_hour
from .evaluation import losocv
from .gp.covariance import JITTER, CovarianceError, matern_nu1
from .gp.model import FitError, GpData, ModelSpec
from .gp.priors import DEFAULT_PRIORS, PriorSet

PWS1 = (StationClass.A, StationClass.B, StationClass.C)
STRATEGIES = ("reliable", "pooled", "grouped")
SIM_GROUPS = {StationClass.MET: "Met", StationClass.A: "PWS-1", StationClass.B: "PWS-1",
              StationClass.C: "PWS-1", StationClass.U: "PWS-2"}


@dataclass(frozen=True)
class SimulationConfig:
    """Generator settings.

    Without an explicit ``layout``, ``n_met`` MET, ``n_pws1`` A/B/C (cycled)
    and ``n_pws2`` U stations are placed uniformly in the box
    ``lat0 + [0, box_deg]`` x ``lon0 + [0, box_deg]``. ``junk_group`` lists
    station ids emitted as independent ``N(mean, junk_sd^2)`` noise; ``None``
    means every U station. ``junk_sd`` defaults to ``sigma_z``, so junk
    stations share the field's marginal spread but none of its correlation.
    """

    layout: tuple[StationRecord, ...] | None = None
    n_met: int = 23
    n_pws1: int = 19
    n_pws2: int = 7
    lat0: float = 51.5
    lon0: float = -10.0
    box_deg: float = 4.0
    T: int = 100
    phi: float = 200.0
    sigma_z: float = 0.7
    sigma_met: float = 0.2
    sigma_pws1: float = 0.5
    sigma_pws2: float | None = None
    rho: float = 0.8
    mean: float = 0.0
    junk_sd: float | None = None
    junk_group: frozenset[str] | None = None
    seed: int = 0

    def __post_init__(self):
        sds = [self.sigma_z, self.sigma_met, self.sigma_pws1, self.phi]
        sds += [v for v in (self.sigma_pws2, self.junk_sd) if v is not None]
        if any(not (v > 0) for v in sds):
            raise ValidationError("all sds and the range must be positive")
        if self.T < 2:
            raise ValidationError("need T >= 2")
        if not -1 < self.rho < 1:
            raise ValidationError("rho must lie in (-1, 1)")
        if self.layout is not None and self.junk_group is not None:
            unknown = set(self.junk_group) - {s.id for s in self.layout}
            if unknown:
                raise ValidationError(f"junk stations not in layout: {sorted(unknown)}")

    @property
    def junk_scale(self) -> float:
        return self.sigma_z if self.junk_sd is None else self.junk_sd

    def noise_sd(self, cls: StationClass) -> float:
        if cls is StationClass.MET:
            return self.sigma_met
        if cls is StationClass.U and self.sigma_pws2 is not None:
            return self.sigma_pws2
        return self.sigma_pws1


def default_layout(config: SimulationConfig, rng: np.random.Generator) -> list[StationRecord]:
    classes = ([StationClass.MET] * config.n_met
               + [PWS1[k % 3] for k in range(config.n_pws1)]
               + [StationClass.U] * config.n_pws2)
    lat = config.lat0 + config.box_deg * rng.random(len(classes))
    lon = config.lon0 + config.box_deg * rng.random(len(classes))
    return [StationRecord(f"{c.value}{k:02d}", float(la), float(lo), c)
            for k, (c, la, lo) in enumerate(zip(classes, lat, lon))]


@dataclass(frozen=True)
class SimulatedDataset:
    stations: tuple[StationRecord, ...]
    z: np.ndarray  # (T, n) latent field
    y: np.ndarray  # (T, n) observations
    junk: np.ndarray  # (n,) bool
    config: SimulationConfig

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.stations]

    def to_gp_data(self, t0="2024-01-01T00:00Z") -> GpData:
        times = to_hour(t0) + np.arange(self.y.shape[0]) * HOUR
        from .core import hours_of_day

        return GpData(
            ids=self.ids,
            lat=[s.lat for s in self.stations],
            lon=[s.lon for s in self.stations],
            classes=[s.station_class for s in self.stations],
            y=self.y,
            mask=np.ones(self.y.shape, bool),
            hours=hours_of_day(times),
            times=times,
        )

    def to_dataset(self, t0="2024-01-01T00:00Z") -> Dataset:
        times = to_hour(t0) + np.arange(self.y.shape[0]) * HOUR
        return Dataset(list(self.stations), times, self.y.copy(), np.ones(self.y.shape, bool))


def _spatial_factor(stations, phi, sigma_z) -> np.ndarray:
    lat = np.array([s.lat for s in stations])
    lon = np.array([s.lon for s in stations])
    C = matern_nu1(distance_matrix(lat, lon), phi, sigma_z)
    for jit in (JITTER, 1e-8, 1e-6):
        try:
            return linalg.cholesky(C + jit * sigma_z ** 2 * np.eye(len(stations)), lower=True)
        except linalg.LinAlgError:
            continue
    raise CovarianceError("covariance not positive definite")


def simulate(config: SimulationConfig) -> SimulatedDataset:
    """Draw one data set; bit-identical for identical configs."""
    rng = np.random.default_rng(config.seed)
    stations = list(config.layout) if config.layout is not None else default_layout(config, rng)
    n, T = len(stations), config.T
    L = _spatial_factor(stations, config.phi, config.sigma_z)
    eta = rng.standard_normal((T, n))
    e = rng.standard_normal((T, n))
    junk_draw = rng.standard_normal((T, n))
    z = np.empty((T, n))
    z[0] = L @ eta[0]
    innov = math.sqrt(1.0 - config.rho ** 2)
    for t in range(1, T):
        z[t] = config.rho * z[t - 1] + innov * (L @ eta[t])
    sd = np.array([config.noise_sd(s.station_class) for s in stations])
    y = config.mean + z + e * sd
    if config.junk_group is None:
        junk = np.array([s.station_class is StationClass.U for s in stations])
    else:
        junk = np.array([s.id in config.junk_group for s in stations])
    y[:, junk] = config.mean + config.junk_scale * junk_draw[:, junk]
    return SimulatedDataset(tuple(stations), z, y, junk, config)


# --------------------------------------------------------------------------- study

def strategy_spec(strategy: str, variant: str) -> ModelSpec:
    """The three comparison strategies on a constant-mean model."""
    base = dict(variant=variant, covariate=False, diurnal=False, transform="identity", name=strategy)
    if strategy == "reliable":
        return ModelSpec(nugget="pooled", classes=frozenset({StationClass.MET}), **base)
    if strategy == "pooled":
        return ModelSpec(nugget="pooled", **base)
    if strategy == "grouped":
        return ModelSpec(nugget="grouped", groups=SIM_GROUPS, **base)
    raise ValidationError(f"unknown strategy {strategy!r}")


@dataclass(frozen=True)
class StudyRow:
    variant: str
    strategy: str
    noise: float
    rep: int
    rmse: float
    crps: float
    phi: float
    sigma_z: float
    rho: float
    sigma: dict = field(default_factory=dict)
    n_failed: int = 0
    error: str = ""


def run_simulation_study(
    noise_levels: Sequence[float] = (0.3, 0.4, 0.5),
    variants: Sequence[str] = ("igp", "ar1"),
    strategies: Sequence[str] = STRATEGIES,
    n_reps: int = 20,
    base: SimulationConfig = SimulationConfig(),
    priors: PriorSet = DEFAULT_PRIORS,
    progress: Callable[[StudyRow], None] | None = None,
) -> list[StudyRow]:
    """Simulate, fit each strategy, cross-validate over the MET stations.

    Replication ``r`` uses seed ``base.seed + r`` for every noise level, so
    the station layout, latent field and standardised noise are shared across
    noise levels within a replication.
    """
    rows = []
    for r in range(n_reps):
        for noise in noise_levels:
            sim = simulate(replace(base, sigma_pws1=noise, seed=base.seed + r))
            data = sim.to_gp_data()
            for variant in variants:
                for strategy in strategies:
                    spec = strategy_spec(strategy, variant)
                    try:
                        rep = losocv(data, [spec], priors=priors)[0]
                    except (FitError, np.linalg.LinAlgError, ValidationError) as exc:
                        row = StudyRow(variant, strategy, noise, r, float("nan"), float("nan"),
                                       float("nan"), float("nan"), float("nan"), error=str(exc))
                    else:
                        h = rep.full_fit.hyper
                        row = StudyRow(variant, strategy, noise, r, rep.rmse, rep.crps_sqrt, h.phi, h.sigma_z,
                                       float("nan") if h.rho is None else h.rho, dict(h.group_sd),
                                       len(rep.failures))
                    rows.append(row)
                    if progress is not None:
                        progress(row)
    return rows


def summarise_study(rows: Iterable[StudyRow]) -> list[dict]:
    """Mean scores and fitted parameters per (variant, noise, strategy)."""
    cells: dict[tuple, list[StudyRow]] = {}
    for row in rows:
        cells.setdefault((row.variant, row.noise, row.strategy), []).append(row)
    out = []
    for (variant, noise, strategy), rs in sorted(cells.items(), key=lambda kv: (
            kv[0][0], kv[0][1], STRATEGIES.index(kv[0][2]) if kv[0][2] in STRATEGIES else 99)):
        ok = [r for r in rs if np.isfinite(r.rmse)]
        rec = {"variant": variant, "noise": noise, "strategy": strategy, "n_reps": len(ok),
               "n_failed": len(rs) - len(ok) + sum(r.n_failed for r in ok)}
        for key in ("rmse", "crps", "phi", "sigma_z", "rho"):
            rec[key] = float(np.mean([getattr(r, key) for r in ok])) if ok else float("nan")
        groups = sorted({g for r in ok for g in r.sigma})
        for g in groups:
            rec[f"sigma_{g}"] = float(np.mean([r.sigma[g] for r in ok if g in r.sigma]))
        out.append(rec)
    return out


__all__ = [
    "PWS1", "SIM_GROUPS", "STRATEGIES", "SimulatedDataset", "SimulationConfig", "StudyRow", "default_layout",
    "run_simulation_study", "simulate", "strategy_spec", "summarise_study",
]
