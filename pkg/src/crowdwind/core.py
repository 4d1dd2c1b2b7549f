"""Domain types shared by every stage of the pipeline.

Wind series live on an hourly UTC axis. Missing hours are carried by an
explicit boolean mask; the value slot under a missing hour holds NaN only so
that arrays stay rectangular, and code never tests for NaN to decide
availability.
"""
from __future__ import annotations

import datetime as _dt
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0
HOUR = np.timedelta64(1, "h")


class ValidationError(ValueError):
    """Raised when input data violate a domain invariant."""


class StationClass(str, enum.Enum):
    """Observation source. ``MET`` is the trusted network, A/B/C are graded
    personal stations and ``U`` is an ungraded personal station."""

    MET = "MET"
    A = "A"
    B = "B"
    C = "C"
    U = "U"

    @classmethod
    def parse(cls, text: str) -> "StationClass":
        key = text.strip().upper()
        try:
            return cls(key)
        except ValueError:
            raise ValidationError(f"unknown station class {text!r}") from None

    @property
    def is_pws(self) -> bool:
        return self is not StationClass.MET


@dataclass(frozen=True)
class StationRecord:
    id: str
    lat: float
    lon: float
    station_class: StationClass
    dist_to_sea_km: float | None = None

    def __post_init__(self):
        if not self.id:
            raise ValidationError("station id must be non-empty")
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValidationError(f"station {self.id}: non-finite coordinates")
        if not -90.0 <= self.lat <= 90.0:
            raise ValidationError(f"station {self.id}: latitude {self.lat} out of range")
        if not -180.0 <= self.lon <= 180.0:
            raise ValidationError(f"station {self.id}: longitude {self.lon} out of range")
        if self.dist_to_sea_km is not None and not (
            math.isfinite(self.dist_to_sea_km) and self.dist_to_sea_km >= 0
        ):
            raise ValidationError(f"station {self.id}: dist_to_sea_km must be finite and >= 0")


@dataclass(frozen=True)
class WeibullParams:
    shape: float
    scale: float

    def __post_init__(self):
        for name in ("shape", "scale"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValidationError(f"Weibull {name} must be finite and > 0, got {v}")


def to_hour(ts) -> np.datetime64:
    """Convert a timestamp to ``datetime64[h]``, rejecting sub-hour offsets.

    Strings are parsed as ISO-8601; a trailing ``Z`` or ``+00:00`` is accepted
    and any other offset is converted to UTC.
    """
    if isinstance(ts, np.datetime64):
        exact = ts.astype("datetime64[s]")
    else:
        if isinstance(ts, str):
            text = ts.strip()
            if text.endswith("Z"):
                text = text[:-1] + "+00:00"
            try:
                ts = _dt.datetime.fromisoformat(text)
            except ValueError:
                raise ValidationError(f"unparseable timestamp {ts!r}") from None
        if not isinstance(ts, _dt.datetime):
            raise ValidationError(f"unsupported timestamp type {type(ts).__name__}")
        if ts.tzinfo is not None:
            ts = ts.astimezone(_dt.timezone.utc).replace(tzinfo=None)
        if ts.microsecond:
            raise ValidationError(f"timestamp {ts.isoformat()} is not hour-aligned")
        exact = np.datetime64(ts, "s")
    hour = exact.astype("datetime64[h]")
    if hour.astype("datetime64[s]") != exact:
        raise ValidationError(f"timestamp {exact} is not hour-aligned")
    return hour


def hour_of_day(ts) -> int:
    """Hour index in ``1..24``; 01:00 maps to 1 and midnight maps to 24."""
    hour = to_hour(ts)
    h = int((hour - hour.astype("datetime64[D]")) // HOUR)
    return 24 if h == 0 else h


def next_hour_of_day(h: int) -> int:
    if not 1 <= h <= 24:
        raise ValidationError(f"hour of day must be in 1..24, got {h}")
    return h % 24 + 1


def hours_of_day(times: np.ndarray) -> np.ndarray:
    """Vectorised :func:`hour_of_day` for a ``datetime64[h]`` array."""
    times = np.asarray(times, dtype="datetime64[h]")
    h = ((times - times.astype("datetime64[D]")) // HOUR).astype(int)
    h[h == 0] = 24
    return h


@dataclass(frozen=True)
class WindSeries:
    """Hourly series for one station.

    ``values`` may contain ``None`` for missing hours; after construction the
    array is float with NaN in those slots and ``present`` holds the mask.
    """

    station_id: str
    t0: np.datetime64
    values: np.ndarray
    present: np.ndarray = field(init=False)

    def __init__(self, station_id: str, t0, values: Iterable[float | None]):
        vals = list(values)
        if not vals:
            raise ValidationError(f"series {station_id}: empty series")
        present = np.array([v is not None for v in vals], dtype=bool)
        arr = np.array([np.nan if v is None else float(v) for v in vals], dtype=float)
        obs = arr[present]
        if not np.all(np.isfinite(obs)):
            raise ValidationError(f"series {station_id}: non-finite wind speed")
        if np.any(obs < 0):
            raise ValidationError(f"series {station_id}: negative wind speed")
        arr.setflags(write=False)
        present.setflags(write=False)
        object.__setattr__(self, "station_id", station_id)
        object.__setattr__(self, "t0", to_hour(t0))
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "present", present)

    @classmethod
    def from_arrays(cls, station_id: str, t0, values: np.ndarray, present: np.ndarray) -> "WindSeries":
        values = np.asarray(values, dtype=float)
        present = np.asarray(present, dtype=bool)
        return cls(station_id, t0, [float(v) if p else None for v, p in zip(values, present)])

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, WindSeries):
            return NotImplemented
        return (
            self.station_id == other.station_id
            and self.t0 == other.t0
            and np.array_equal(self.present, other.present)
            and np.array_equal(self.values[self.present], other.values[other.present])
        )

    __hash__ = None

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self)) * HOUR

    @property
    def observed(self) -> np.ndarray:
        return self.values[self.present]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated stations and their series on a common hourly axis.

    ``values`` is ``(T, n)`` with columns ordered as ``stations``.
    """

    stations: tuple[StationRecord, ...]
    times: np.ndarray
    values: np.ndarray
    present: np.ndarray

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.stations)

    @property
    def n_sites(self) -> int:
        return len(self.stations)

    @property
    def n_times(self) -> int:
        return len(self.times)

    def index(self, station_id: str) -> int:
        try:
            return self.ids.index(station_id)
        except ValueError:
            raise KeyError(station_id) from None

    def station(self, station_id: str) -> StationRecord:
        return self.stations[self.index(station_id)]

    def series(self, station_id: str) -> WindSeries:
        j = self.index(station_id)
        return WindSeries.from_arrays(station_id, self.times[0], self.values[:, j], self.present[:, j])

    def subset(self, station_ids: Sequence[str]) -> "Dataset":
        """Dataset restricted to ``station_ids`` (time axis unchanged)."""
        cols = [self.index(s) for s in station_ids]
        return Dataset(
            stations=tuple(self.stations[j] for j in cols),
            times=self.times,
            values=self.values[:, cols].copy(),
            present=self.present[:, cols].copy(),
        )

    def with_values(self, values: np.ndarray) -> "Dataset":
        values = np.where(self.present, values, np.nan)
        return Dataset(self.stations, self.times, values, self.present.copy())

    def classes(self) -> tuple[StationClass, ...]:
        return tuple(s.station_class for s in self.stations)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.stations == other.stations
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.present, other.present)
            and np.array_equal(self.values[self.present], other.values[other.present])
        )


def validate_dataset(stations: Sequence[StationRecord], series: Sequence[WindSeries]) -> Dataset:
    """Check references and merge series onto the union hourly axis.

    Stations without a series are kept with an all-missing column so that
    metadata-only sites (prediction targets, say) survive validation.
    """
    ids = [s.id for s in stations]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"duplicate station id {dup[0]!r}")
    if not series:
        raise ValidationError("no series supplied")
    by_id: dict[str, WindSeries] = {}
    for s in series:
        if s.station_id not in ids:
            raise ValidationError(f"series references unknown station {s.station_id!r}")
        if s.station_id in by_id:
            raise ValidationError(f"more than one series for station {s.station_id!r}")
        by_id[s.station_id] = s

    start = min(s.t0 for s in series)
    end = max(s.t0 + (len(s) - 1) * HOUR for s in series)
    n_t = int((end - start) // HOUR) + 1
    times = start + np.arange(n_t) * HOUR
    values = np.full((n_t, len(stations)), np.nan)
    present = np.zeros((n_t, len(stations)), dtype=bool)
    for j, st in enumerate(stations):
        s = by_id.get(st.id)
        if s is None:
            continue
        off = int((s.t0 - start) // HOUR)
        values[off:off + len(s), j] = s.values
        present[off:off + len(s), j] = s.present
    values[~present] = np.nan
    return Dataset(tuple(stations), times, values, present)


def haversine_km(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Great-circle distance on a 6371 km sphere; broadcasts."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dp / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def distance_matrix(lat_a, lon_a, lat_b=None, lon_b=None) -> np.ndarray:
    """Pairwise Haversine distances in km between two point sets."""
    lat_a, lon_a = np.asarray(lat_a, float), np.asarray(lon_a, float)
    if lat_b is None:
        lat_b, lon_b = lat_a, lon_a
    lat_b, lon_b = np.asarray(lat_b, float), np.asarray(lon_b, float)
    return haversine_km(lat_a[:, None], lon_a[:, None], lat_b[None, :], lon_b[None, :])
