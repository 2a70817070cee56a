"""Station CSV ingestion, smoothing, standardization, grids and splits.

Missing observations are carried as NaN in float64 arrays throughout the
package; every series is contiguous at daily resolution from its first to
its last reported date.
"""
from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ConflictError,
    DegenerateDataError,
    EmptyInputError,
    InvalidArgumentError,
    MissingInputError,
    ParseError,
)

CSV_COLUMNS = ("station_id", "lon", "lat", "date")


@dataclass(frozen=True)
class StationSeries:
    station_id: str
    lon: float
    lat: float
    start_date: dt.date
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "lon", float(self.lon))
        object.__setattr__(self, "lat", float(self.lat))
        if not -180.0 <= self.lon <= 180.0:
            raise InvalidArgumentError(f"station {self.station_id}: lon {self.lon} outside [-180, 180]")
        if not -90.0 <= self.lat <= 90.0:
            raise InvalidArgumentError(f"station {self.station_id}: lat {self.lat} outside [-90, 90]")
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dates(self) -> list[dt.date]:
        return [self.start_date + dt.timedelta(days=k) for k in range(len(self.values))]

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    def with_values(self, values) -> "StationSeries":
        return StationSeries(self.station_id, self.lon, self.lat, self.start_date, values)


@dataclass(frozen=True)
class StandardizationParams:
    mean: float
    std: float

    def __post_init__(self):
        if not (self.std > 0 and math.isfinite(self.std) and math.isfinite(self.mean)):
            raise DegenerateDataError(f"invalid standardization params mean={self.mean} std={self.std}")

    def to_text(self) -> str:
        return f"mean={self.mean!r}\nstd={self.std!r}\n"

    @classmethod
    def from_text(cls, text: str) -> "StandardizationParams":
        kv = parse_key_values(text)
        try:
            return cls(float(kv["mean"]), float(kv["std"]))
        except KeyError as exc:
            raise ParseError(f"standardization params missing key {exc}") from None


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Regular lon/lat raster with cell centers strictly inside ``bbox``.

    Row ``j`` of the raster holds cells whose latitude center is
    ``lat_min + (j + 0.5) * dlat``, i.e. row 0 is the southern edge.
    """

    bbox: tuple[float, float, float, float]
    nx: int
    ny: int
    times: tuple[int, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    def unit_centers(self) -> tuple[np.ndarray, np.ndarray]:
        u = (np.arange(self.nx) + 0.5) / self.nx
        v = (np.arange(self.ny) + 0.5) / self.ny
        uu, vv = np.meshgrid(u, v)
        return uu, vv

    def centers(self) -> np.ndarray:
        """Cell centers as an ``(ny * nx, 2)`` array of (lon, lat), row-major."""
        uu, vv = self.unit_centers()
        lon, lat = self.from_unit(uu.ravel(), vv.ravel())
        return np.column_stack([lon, lat])

    def to_unit(self, lon, lat):
        lon_min, lon_max, lat_min, lat_max = self.bbox
        u = (np.asarray(lon, dtype=np.float64) - lon_min) / (lon_max - lon_min)
        v = (np.asarray(lat, dtype=np.float64) - lat_min) / (lat_max - lat_min)
        return u, v

    def from_unit(self, u, v):
        lon_min, lon_max, lat_min, lat_max = self.bbox
        return lon_min + np.asarray(u) * (lon_max - lon_min), lat_min + np.asarray(v) * (lat_max - lat_min)

    def contains(self, lon, lat) -> np.ndarray:
        lon_min, lon_max, lat_min, lat_max = self.bbox
        lon = np.asarray(lon)
        lat = np.asarray(lat)
        return (lon >= lon_min) & (lon <= lon_max) & (lat >= lat_min) & (lat <= lat_max)


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {raw!r}", line=lineno)
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_station_csv(path, value_column: str = "precip_mm") -> list[StationSeries]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"station file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyInputError(f"{path}: empty file")
        expected = list(CSV_COLUMNS) + [value_column]
        if [h.strip() for h in header] != expected:
            raise ParseError(f"header must be {','.join(expected)}, got {','.join(header)}", line=1)

        rows: dict[str, dict[dt.date, tuple[float, int]]] = {}
        coords: dict[str, tuple[float, float, int]] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 5:
                raise ParseError(f"expected 5 fields, got {len(row)}", line=lineno)
            sid, lon_s, lat_s, date_s, val_s = (c.strip() for c in row)
            if not sid:
                raise ParseError("empty station_id", line=lineno)
            try:
                lon, lat = float(lon_s), float(lat_s)
                day = dt.date.fromisoformat(date_s)
                value = float(val_s) if val_s else math.nan
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if not (-180 <= lon <= 180 and -90 <= lat <= 90):
                raise ParseError(f"coordinates ({lon}, {lat}) out of range", line=lineno)
            if val_s and not math.isfinite(value):
                raise ParseError(f"non-finite value {val_s!r}", line=lineno)

            if sid in coords:
                plon, plat, pline = coords[sid]
                if (plon, plat) != (lon, lat):
                    raise ConflictError(
                        f"station {sid}: coordinates on line {lineno} differ from line {pline}"
                    )
            else:
                coords[sid] = (lon, lat, lineno)
            by_date = rows.setdefault(sid, {})
            if day in by_date:
                raise ConflictError(
                    f"duplicate station/date {sid} {day.isoformat()} on lines {by_date[day][1]} and {lineno}"
                )
            by_date[day] = (value, lineno)

    if not rows:
        raise EmptyInputError(f"{path}: no data rows")

    stations = []
    for sid in sorted(rows):
        by_date = rows[sid]
        start, stop = min(by_date), max(by_date)
        values = np.full((stop - start).days + 1, np.nan)
        for day, (value, _) in by_date.items():
            values[(day - start).days] = value
        lon, lat, _ = coords[sid]
        stations.append(StationSeries(sid, lon, lat, start, values))
    return stations


def write_station_csv(path, stations: Sequence[StationSeries], value_column: str = "precip_mm") -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(CSV_COLUMNS) + [value_column])
        for s in stations:
            for day, value in zip(s.dates, s.values):
                writer.writerow(
                    [s.station_id, repr(s.lon), repr(s.lat), day.isoformat(), "" if np.isnan(value) else repr(float(value))]
                )


def _as_series(series) -> np.ndarray:
    return np.array([math.nan if v is None else v for v in series], dtype=np.float64)


def moving_average(series, window: int = 10) -> np.ndarray:
    """Trailing mean over the last ``window`` entries, ignoring missing ones.

    The first ``window - 1`` outputs average over the shorter history that
    exists. An output is missing when fewer than half (rounded up) of the
    entries in its effective window are observed.
    """
    if int(window) != window or window < 1:
        raise InvalidArgumentError(f"window must be a positive integer, got {window}")
    window = int(window)
    x = _as_series(series)
    n = len(x)
    observed = ~np.isnan(x)
    csum = np.concatenate([[0.0], np.cumsum(np.where(observed, x, 0.0))])
    ccount = np.concatenate([[0], np.cumsum(observed)])
    t = np.arange(n)
    lo = np.maximum(t - window + 1, 0)
    total = csum[t + 1] - csum[lo]
    count = ccount[t + 1] - ccount[lo]
    needed = np.ceil((t + 1 - lo) / 2.0)
    out = np.full(n, np.nan)
    ok = count >= needed
    out[ok] = total[ok] / count[ok]
    return out


def standardize(values) -> tuple[np.ndarray, StandardizationParams]:
    """Global z-score using the sample (n - 1) standard deviation."""
    x = np.asarray(values, dtype=np.float64)
    obs = x[~np.isnan(x)]
    if obs.size < 2:
        raise DegenerateDataError(f"need at least 2 observed values, got {obs.size}")
    mean = float(obs.mean())
    std = float(obs.std(ddof=1))
    if not std > 0:
        raise DegenerateDataError("zero variance; cannot standardize")
    params = StandardizationParams(mean, std)
    return (x - mean) / std, params


def apply_standardization(values, params: StandardizationParams) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) - params.mean) / params.std


def destandardize(values, params: StandardizationParams) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * params.std + params.mean


def smooth_and_standardize(stations: Sequence[StationSeries], window: int = 10):
    """Per-station trailing moving average, then one global standardization."""
    if not stations:
        raise EmptyInputError("no stations")
    smoothed = [moving_average(s.values, window) for s in stations]
    _, params = standardize(np.concatenate(smoothed))
    out = [s.with_values(apply_standardization(v, params)) for s, v in zip(stations, smoothed)]
    return out, params


def make_grid(bbox, nx: int, ny: int, times=()) -> SpaceTimeGrid:
    if len(bbox) != 4:
        raise InvalidArgumentError(f"bbox must be (lon_min, lon_max, lat_min, lat_max), got {bbox}")
    lon_min, lon_max, lat_min, lat_max = (float(b) for b in bbox)
    if not (lon_min < lon_max and lat_min < lat_max):
        raise InvalidArgumentError(f"degenerate or inverted bbox {bbox}")
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise InvalidArgumentError(f"nx, ny must be positive integers, got {nx}, {ny}")
    times = tuple(int(t) for t in times)
    if any(b <= a for a, b in zip(times, times[1:])):
        raise InvalidArgumentError("times must be strictly increasing")
    return SpaceTimeGrid((lon_min, lon_max, lat_min, lat_max), int(nx), int(ny), times)


def _parse_times(spec: str) -> list[int]:
    spec = spec.strip()
    if not spec:
        return []
    if ":" in spec:
        parts = [int(p) for p in spec.split(":")]
        if len(parts) == 2:
            parts.append(1)
        start, stop, step = parts
        if step < 1:
            raise InvalidArgumentError(f"time step must be >= 1, got {step}")
        return list(range(start, stop, step))
    return [int(p) for p in spec.split(",") if p.strip()]


def parse_grid_spec(text: str) -> SpaceTimeGrid:
    """Read a grid spec: ``lon_min lon_max lat_min lat_max nx ny`` keys plus
    optional ``times`` as ``start:stop[:step]`` or a comma list of day indices."""
    kv = parse_key_values(text)
    try:
        bbox = tuple(float(kv[k]) for k in ("lon_min", "lon_max", "lat_min", "lat_max"))
        nx, ny = int(kv["nx"]), int(kv["ny"])
        times = _parse_times(kv.get("times", ""))
    except KeyError as exc:
        raise ParseError(f"grid spec missing key {exc}") from None
    except ValueError as exc:
        raise ParseError(f"grid spec: {exc}") from None
    return make_grid(bbox, nx, ny, times)


def split_train_test(stations: Sequence, holdout_fraction: float, seed: int):
    """Hold out whole stations. ``floor(n * f)`` go to test, clamped to [1, n - 1]."""
    if not 0 < holdout_fraction < 1:
        raise InvalidArgumentError(f"holdout_fraction must be in (0, 1), got {holdout_fraction}")
    n = len(stations)
    if n < 2:
        raise InvalidArgumentError(f"need at least 2 stations to split, got {n}")
    n_test = min(max(1, math.floor(n * holdout_fraction)), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    test_idx = set(order[:n_test].tolist())
    train = [s for i, s in enumerate(stations) if i not in test_idx]
    test = [s for i, s in enumerate(stations) if i in test_idx]
    return train, test
