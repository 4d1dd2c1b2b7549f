"""Station screening: completeness, rank transforms and neighbour agreement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core import Dataset, StationClass, WindSeries, distance_matrix


class QcError(ValueError):
    pass


@dataclass(frozen=True)
class QcReport:
    station_id: str
    frac_present: float
    neighbour_checks: tuple[tuple[str, float, float], ...] = ()
    fail_reasons: tuple[str, ...] = ()
    n_good_neighbours: int = 0

    @property
    def passed(self) -> bool:
        return not self.fail_reasons


def _values_present(series) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(series, WindSeries):
        return np.asarray(series.values, float), np.asarray(series.present, bool)
    values, present = series
    return np.asarray(values, float), np.asarray(present, bool)


def missing_data_filter(series, threshold: float = 0.9, axis_length: int | None = None) -> tuple[bool, float]:
    """Pass iff the present fraction over the axis reaches ``threshold``."""
    _, present = _values_present(series)
    n = axis_length if axis_length is not None else present.size
    if n == 0:
        return False, 0.0
    frac = float(present.sum()) / n
    return frac >= threshold, frac


def rank_transform(series) -> np.ndarray:
    """Average-tied rank divided by the number of present values; NaN where missing."""
    values, present = _values_present(series)
    obs = values[present]
    if obs.size < 2:
        raise QcError("need at least two present values")
    if np.all(obs == obs[0]):
        raise QcError("degenerate ranks")
    out = np.full(values.shape, np.nan)
    out[present] = stats.rankdata(obs, method="average") / obs.size
    return out


def spearman(series_a, series_b, min_overlap: int = 3) -> float:
    """Pearson correlation of average ranks over the common present times."""
    va, pa = _values_present(series_a)
    vb, pb = _values_present(series_b)
    if va.shape != vb.shape:
        raise QcError("series must share a time axis")
    both = pa & pb
    if both.sum() < min_overlap:
        raise QcError("insufficient overlap")
    ra = stats.rankdata(va[both])
    rb = stats.rankdata(vb[both])
    if np.all(ra == ra[0]) or np.all(rb == rb[0]):
        return float("nan")
    return float(np.corrcoef(ra, rb)[0, 1])


def _coords(dataset: Dataset):
    lat = np.array([s.lat for s in dataset.stations])
    lon = np.array([s.lon for s in dataset.stations])
    return lat, lon


def neighbour_filter(
    dataset: Dataset,
    min_neighbours: int = 5,
    rho_min: float = 0.5,
    candidate_size: int | None = None,
    missing_threshold: float | None = None,
    not_realtime: frozenset[str] | set[str] = frozenset(),
) -> list[QcReport]:
    """Screen personal stations by agreement with their nearest neighbours.

    Each PWS is compared with its ``max(min_neighbours, 8)`` nearest stations
    of any class (``candidate_size`` overrides). It passes when at least
    ``min_neighbours`` of them have Spearman correlation above ``rho_min``.
    MET stations are never removed. ``missing_threshold`` additionally applies
    :func:`missing_data_filter`; ``not_realtime`` lists stations flagged as not
    uploading in near real time. Reports are sorted by station id.
    """
    n = dataset.n_sites
    if n - 1 < min_neighbours:
        raise QcError("insufficient neighbours")
    size = min(candidate_size or max(min_neighbours, 8), n - 1)
    lat, lon = _coords(dataset)
    dist = distance_matrix(lat, lon)
    reports = []
    for j, st in enumerate(dataset.stations):
        col = (dataset.values[:, j], dataset.present[:, j])
        _, frac = missing_data_filter(col, 0.0)
        reasons = []
        checks = []
        good = 0
        if st.station_class is not StationClass.MET:
            if missing_threshold is not None and frac < missing_threshold:
                reasons.append(f"present fraction {frac:.3f} below {missing_threshold}")
            if st.id in not_realtime:
                reasons.append("not uploading in near real time")
            order = [k for k in np.argsort(dist[j], kind="stable") if k != j][:size]
            for k in order:
                try:
                    rho = spearman(col, (dataset.values[:, k], dataset.present[:, k]))
                except QcError:
                    rho = float("nan")
                checks.append((dataset.ids[k], float(dist[j, k]), rho))
                if rho > rho_min:
                    good += 1
            if good < min_neighbours:
                reasons.append(f"only {good} of {len(order)} nearest neighbours with rho > {rho_min}")
        reports.append(QcReport(st.id, frac, tuple(checks), tuple(reasons), good))
    return sorted(reports, key=lambda r: r.station_id)


def apply_qc(dataset: Dataset, reports) -> Dataset:
    keep = {r.station_id for r in reports if r.passed}
    return dataset.subset([sid for sid in dataset.ids if sid in keep])


@dataclass(frozen=True)
class PairCorrelation:
    id_a: str
    id_b: str
    distance_km: float
    rho: float
    class_pair: str


def _class_pair(a: StationClass, b: StationClass) -> str:
    ka = "MET" if a is StationClass.MET else "PWS"
    kb = "MET" if b is StationClass.MET else "PWS"
    return "-".join(sorted((ka, kb), key=lambda s: (s != "MET", s)))


def correlation_vs_distance(
    dataset: Dataset,
    pair_class_filter: set[str] | None = None,
    increments: bool = False,
    method: str = "spearman",
    min_overlap: int = 3,
) -> list[PairCorrelation]:
    """Correlation and Haversine distance for every station pair.

    With ``increments`` the hourly differences are correlated instead of the
    levels (an increment is present only when both hours are present).
    ``method`` is ``"spearman"`` or ``"pearson"``. ``pair_class_filter`` keeps
    pairs whose label (``MET-MET``, ``MET-PWS``, ``PWS-PWS``) is in the set.
    """
    values, present = dataset.values, dataset.present
    if increments:
        values = np.diff(values, axis=0)
        present = present[1:] & present[:-1]
    lat, lon = _coords(dataset)
    dist = distance_matrix(lat, lon)
    rows = []
    for i in range(dataset.n_sites):
        for j in range(i + 1, dataset.n_sites):
            label = _class_pair(dataset.stations[i].station_class, dataset.stations[j].station_class)
            if pair_class_filter is not None and label not in pair_class_filter:
                continue
            both = present[:, i] & present[:, j]
            if both.sum() < min_overlap:
                rho = float("nan")
            elif method == "spearman":
                rho = spearman((values[:, i], present[:, i]), (values[:, j], present[:, j]), min_overlap)
            elif method == "pearson":
                a, b = values[both, i], values[both, j]
                rho = float(np.corrcoef(a, b)[0, 1]) if a.std() > 0 and b.std() > 0 else float("nan")
            else:
                raise ValueError(f"unknown method {method!r}")
            rows.append(PairCorrelation(dataset.ids[i], dataset.ids[j], float(dist[i, j]), rho, label))
    return rows


def fit_exponential_decay(distance_km, rho) -> tuple[float, float]:
    """Least-squares fit of ``rho = a * exp(-d / scale)``; returns ``(a, 1/scale)``."""
    d = np.asarray(distance_km, float)
    r = np.asarray(rho, float)
    ok = np.isfinite(r) & (r > 0)
    if ok.sum() < 2:
        raise QcError("need at least two positive correlations")
    slope, intercept = np.polyfit(d[ok], np.log(r[ok]), 1)
    return float(np.exp(intercept)), float(-slope)


__all__ = [
    "PairCorrelation", "QcError", "QcReport", "apply_qc", "correlation_vs_distance",
    "fit_exponential_decay", "missing_data_filter", "neighbour_filter", "rank_transform", "spearman",
]
