"""CSV readers and writers for the on-disk schemas.

stations.csv      id,lat,lon,class,dist_to_sea_km   (dist may be empty)
observations.csv  station_id,timestamp,wind_speed_ms (missing hours absent)
gwa.csv           lon,lat,shape,scale
coastline.csv     lat,lon
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (
    HOUR,
    Dataset,
    StationClass,
    StationRecord,
    ValidationError,
    WeibullParams,
    WindSeries,
    to_hour,
    validate_dataset,
)

STATION_HEADER = ["id", "lat", "lon", "class", "dist_to_sea_km"]
OBS_HEADER = ["station_id", "timestamp", "wind_speed_ms"]
GRID_HEADER = ["lon", "lat", "shape", "scale"]


def _rows(path) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        return list(reader.fieldnames or []), rows


def _require(header: Sequence[str], needed: Sequence[str], path) -> None:
    missing = [h for h in needed if h not in header]
    if missing:
        raise ValidationError(f"{path}: missing column(s) {', '.join(missing)}")


def format_float(x: float) -> str:
    # repr round-trips exactly
    return repr(float(x))


def format_timestamp(t: np.datetime64) -> str:
    return str(np.datetime64(t, "h").astype("datetime64[s]")) + "Z"


def read_stations(path) -> list[StationRecord]:
    header, rows = _rows(path)
    _require(header, STATION_HEADER[:4], path)
    out = []
    for r in rows:
        dist = (r.get("dist_to_sea_km") or "").strip()
        out.append(StationRecord(
            id=r["id"].strip(),
            lat=float(r["lat"]),
            lon=float(r["lon"]),
            station_class=StationClass.parse(r["class"]),
            dist_to_sea_km=float(dist) if dist else None,
        ))
    return out


def write_stations(stations: Iterable[StationRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STATION_HEADER)
        for s in stations:
            dist = "" if s.dist_to_sea_km is None else format_float(s.dist_to_sea_km)
            w.writerow([s.id, format_float(s.lat), format_float(s.lon), s.station_class.value, dist])


def read_observation_table(path, value_column: str = "wind_speed_ms") -> dict[str, dict[np.datetime64, float]]:
    header, rows = _rows(path)
    _require(header, ["station_id", "timestamp", value_column], path)
    table: dict[str, dict[np.datetime64, float]] = defaultdict(dict)
    for r in rows:
        text = (r[value_column] or "").strip()
        if not text:
            continue
        sid = r["station_id"].strip()
        t = to_hour(r["timestamp"])
        if t in table[sid]:
            raise ValidationError(f"{path}: duplicate observation for {sid} at {t}")
        table[sid][t] = float(text)
    return dict(table)


def table_to_series(table: Mapping[str, Mapping[np.datetime64, float]]) -> list[WindSeries]:
    out = []
    for sid in sorted(table):
        obs = table[sid]
        if not obs:
            continue
        ts = sorted(obs)
        t0 = ts[0]
        n = int((ts[-1] - t0) // HOUR) + 1
        vals: list[float | None] = [None] * n
        for t in ts:
            vals[int((t - t0) // HOUR)] = obs[t]
        out.append(WindSeries(sid, t0, vals))
    return out


def read_observations(path, value_column: str = "wind_speed_ms") -> list[WindSeries]:
    return table_to_series(read_observation_table(path, value_column))


def load_dataset(stations_path, observations_path, value_column: str = "wind_speed_ms") -> Dataset:
    stations = read_stations(stations_path)
    series = read_observations(observations_path, value_column)
    return validate_dataset(stations, series)


def write_observations(dataset: Dataset, path, extra: Mapping[str, np.ndarray] | None = None) -> None:
    """Write present values in long format; ``extra`` adds ``(T, n)`` columns."""
    extra = dict(extra or {})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(OBS_HEADER + list(extra))
        for j, sid in enumerate(dataset.ids):
            for t in np.flatnonzero(dataset.present[:, j]):
                row = [sid, format_timestamp(dataset.times[t]), format_float(dataset.values[t, j])]
                for arr in extra.values():
                    v = arr[t, j]
                    row.append("" if not math.isfinite(v) else format_float(v))
                w.writerow(row)


def read_grid(path) -> tuple[np.ndarray, np.ndarray, list[WeibullParams]]:
    """Gridded Weibull field as ``(lat, lon, params)``."""
    header, rows = _rows(path)
    _require(header, GRID_HEADER, path)
    if not rows:
        raise ValidationError(f"{path}: empty grid")
    lat = np.array([float(r["lat"]) for r in rows])
    lon = np.array([float(r["lon"]) for r in rows])
    params = [WeibullParams(float(r["shape"]), float(r["scale"])) for r in rows]
    return lat, lon, params


def write_grid(lat, lon, params: Sequence[WeibullParams], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(GRID_HEADER)
        for la, lo, p in zip(lat, lon, params):
            w.writerow([format_float(lo), format_float(la), format_float(p.shape), format_float(p.scale)])


def read_coastline(path) -> tuple[np.ndarray, np.ndarray]:
    header, rows = _rows(path)
    _require(header, ["lat", "lon"], path)
    return np.array([float(r["lat"]) for r in rows]), np.array([float(r["lon"]) for r in rows])


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_table(path) -> list[dict[str, str]]:
    return _rows(path)[1]


def read_config(path) -> dict[str, str]:
    """Parse a ``key = value`` file; ``#`` starts a comment, quotes are stripped."""
    out: dict[str, str] = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{n}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value.strip("\"'")
    return out
