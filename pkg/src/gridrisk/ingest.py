"""Parsing and cleaning of the raw input tables.

Five CSV files feed the pipeline: hourly station weather, station locations,
15-minute outage snapshots, the event-to-tract allocation table, and the
per-tract census/infrastructure profile. Everything here is a pure function
of its inputs; writers exist for every reader so files round-trip.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import DataError, FormatError

EARTH_RADIUS_KM = 6371.0

INFRA_TYPES = (
    "compensator", "generator", "insulator", "line", "pole", "portal",
    "substation", "switch", "terminal", "tower", "transformer",
)

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


class DataWarning(UserWarning):
    """Recoverable irregularity found while cleaning input data."""


# --------------------------------------------------------------------------
# helpers


def _reader(stream: str | TextIO) -> csv.reader:
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    return csv.reader(stream)


def _read_header(rows, required: Sequence[str], what: str) -> list[str]:
    try:
        header = [h.strip() for h in next(rows)]
    except StopIteration:
        raise FormatError(f"{what}: empty file, expected header row") from None
    missing = [c for c in required if c not in header]
    if missing:
        raise FormatError(f"{what}: header lacks column(s) {', '.join(missing)}")
    return header


def _float(cell: str, line: int, column: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"column {column!r}: cannot parse {cell!r} as a number", line) from None
    if not math.isfinite(value):
        raise DataError(f"column {column!r}: non-finite value {cell!r}", line)
    return value


def _int(cell: str, line: int, column: str) -> int:
    value = _float(cell, line, column)
    if value != int(value):
        raise DataError(f"column {column!r}: expected an integer, got {cell!r}", line)
    return int(value)


def fmt_number(x: float) -> str:
    """Shortest text that parses back to exactly ``x``."""
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def parse_hour(text: str) -> int:
    """ISO-8601 timestamp -> whole hours since the Unix epoch, floored, UTC."""
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return int((ts - _EPOCH).total_seconds() // 3600)


def parse_minutes(text: str) -> int:
    """ISO-8601 timestamp -> whole minutes since the Unix epoch, UTC."""
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return int((ts - _EPOCH).total_seconds() // 60)


def format_hour(hour: int) -> str:
    return format_minutes(hour * 60)


def format_minutes(minutes: int) -> str:
    ts = datetime.fromtimestamp(minutes * 60, tz=timezone.utc)
    return ts.strftime("%Y-%m-%dT%H:%M")


# --------------------------------------------------------------------------
# weather


@dataclass(frozen=True)
class WeatherSchema:
    """Ordered weather channel names and which ones are interpolated in time."""

    names: tuple[str, ...] = (
        "tmpc",     # air temperature, degC
        "relh",     # relative humidity, %
        "alti",     # pressure altimeter, inHg
        "sknt",     # wind speed, kt
        "drct",     # wind direction, deg
        "gust",     # wind gust, kt
        "vsby",     # visibility, mi
        "p01i",     # 1-hr precipitation, in
        "dwpc",     # dew point, degC
        "skyc",     # sky cover fraction
    )
    interpolation_group: frozenset[str] = frozenset({"tmpc", "relh", "alti", "dwpc"})

    def __post_init__(self):
        if len(self.names) != 10 or len(set(self.names)) != 10:
            raise FormatError("weather schema needs exactly 10 distinct channel names")
        unknown = set(self.interpolation_group) - set(self.names)
        if unknown:
            raise FormatError(f"interpolated channels not in schema: {sorted(unknown)}")

    @property
    def interpolated(self) -> np.ndarray:
        return np.array([n in self.interpolation_group for n in self.names])

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class WeatherObservation:
    station_id: str
    hour: int
    channels: tuple[float, ...]
    missing_mask: tuple[bool, ...]

    def __post_init__(self):
        if len(self.channels) != 10 or len(self.missing_mask) != 10:
            raise DataError("weather observation must carry exactly 10 channels")


def parse_weather(stream: str | TextIO, schema: WeatherSchema = WeatherSchema()) -> list[WeatherObservation]:
    """Read ``weather.csv`` into one observation per (station, hour).

    Empty cells are flagged missing (their stored value is 0.0 and must not be
    used). When a (station, hour) appears more than once the later row wins;
    output keeps the position of the first occurrence.
    """
    rows = _reader(stream)
    header = _read_header(rows, ("station", "valid", *schema.names), "weather")
    col = {name: header.index(name) for name in ("station", "valid", *schema.names)}
    records: dict[tuple[str, int], WeatherObservation] = {}
    for line, row in enumerate(rows, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            raise DataError(f"expected {len(header)} cells, got {len(row)}", line)
        station = row[col["station"]].strip()
        try:
            hour = parse_hour(row[col["valid"]])
        except ValueError:
            raise DataError(f"bad timestamp {row[col['valid']]!r}", line) from None
        values, mask = [], []
        for name in schema.names:
            cell = row[col[name]].strip()
            if cell == "":
                values.append(0.0)
                mask.append(True)
            else:
                values.append(_float(cell, line, name))
                mask.append(False)
        records[(station, hour)] = WeatherObservation(station, hour, tuple(values), tuple(mask))
    return list(records.values())


def write_weather(observations: Iterable[WeatherObservation], schema: WeatherSchema = WeatherSchema()) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["station", "valid", *schema.names])
    for ob in observations:
        cells = ["" if m else fmt_number(v) for v, m in zip(ob.channels, ob.missing_mask)]
        w.writerow([ob.station_id, format_hour(ob.hour), *cells])
    return out.getvalue()


@dataclass
class WeatherGrid:
    """Dense (hour, station, channel) weather block with no missing values."""

    stations: list[str]
    hours: np.ndarray          # (H,) consecutive integer hours
    values: np.ndarray         # (H, S, 10)

    def to_observations(self) -> list[WeatherObservation]:
        out = []
        for i, hour in enumerate(self.hours):
            for j, station in enumerate(self.stations):
                out.append(WeatherObservation(
                    station, int(hour), tuple(float(v) for v in self.values[i, j]), (False,) * 10))
        return out

    def flat(self) -> np.ndarray:
        """(H, S*10) with each station's channels contiguous, stations in order."""
        return self.values.reshape(len(self.hours), -1)


def fill_missing(
    observations: Sequence[WeatherObservation],
    schema: WeatherSchema = WeatherSchema(),
    stations: Sequence[str] | None = None,
    hours: tuple[int, int] | None = None,
) -> WeatherGrid:
    """Fill every gap in the station/hour/channel grid.

    Within a station, missing cells of the interpolated channels are linearly
    interpolated between the nearest reported hours (constant beyond the
    ends) and all other channels are zero-filled. A station with no row at
    all for an hour takes the mean of the stations that did report. Hours no
    station reported fall back to the per-station temporal rule.

    Args:
        observations: parsed weather rows, any order.
        stations: station order of the output; defaults to sorted ids seen.
        hours: inclusive (first, last) hour span; defaults to the observed span.
    """
    if stations is None:
        stations = sorted({ob.station_id for ob in observations})
    stations = list(stations)
    if not stations:
        raise DataError("no weather stations")
    if hours is None:
        if not observations:
            raise DataError("no weather observations")
        seen = [ob.hour for ob in observations]
        hours = (min(seen), max(seen))
    h0, h1 = hours
    grid_hours = np.arange(h0, h1 + 1)
    n_h, n_s, n_c = len(grid_hours), len(stations), len(schema.names)
    s_index = {s: j for j, s in enumerate(stations)}

    values = np.zeros((n_h, n_s, n_c))
    present = np.zeros((n_h, n_s), dtype=bool)
    valid = np.zeros((n_h, n_s, n_c), dtype=bool)
    for ob in observations:
        j = s_index.get(ob.station_id)
        i = ob.hour - h0
        if j is None or not 0 <= i < n_h:
            continue
        present[i, j] = True
        values[i, j] = ob.channels
        valid[i, j] = ~np.asarray(ob.missing_mask)

    interp = schema.interpolated
    known = valid.copy()
    # reported rows: temporal interpolation / zero fill
    for j in range(n_s):
        rows = present[:, j]
        for c in range(n_c):
            gap = rows & ~valid[:, j, c]
            if not gap.any():
                continue
            if interp[c]:
                src = valid[:, j, c]
                if src.any():
                    values[gap, j, c] = np.interp(grid_hours[gap], grid_hours[src], values[src, j, c])
                    known[gap, j, c] = True
            else:
                values[gap, j, c] = 0.0
                known[gap, j, c] = True

    # absent stations: mean over stations known at that hour
    counts = known.sum(axis=1)                              # (H, C)
    sums = np.where(known, values, 0.0).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts
    for j in range(n_s):
        todo = ~known[:, j, :] & (counts > 0)
        values[:, j, :][todo] = means[todo]
        known[:, j, :] |= todo

    # hours with no usable report anywhere
    for c in range(n_c):
        if not known[:, :, c].any():
            raise DataError(f"weather channel {schema.names[c]!r} is missing at every station and hour")
        for j in range(n_s):
            gap = ~known[:, j, c]
            if not gap.any():
                continue
            src = known[:, j, c]
            if interp[c] and src.any():
                values[gap, j, c] = np.interp(grid_hours[gap], grid_hours[src], values[src, j, c])
            elif interp[c]:
                fallback = known[:, :, c]
                values[gap, j, c] = values[:, :, c][fallback].mean()
            else:
                values[gap, j, c] = 0.0
    return WeatherGrid(stations, grid_hours, values)


@dataclass(frozen=True)
class ChannelStats:
    names: tuple[str, ...]
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["channel", "mean", "std"])
        for n, m, s in zip(self.names, self.mean, self.std):
            w.writerow([n, repr(float(m)), repr(float(s))])
        return out.getvalue()

    @classmethod
    def from_csv(cls, stream: str | TextIO) -> "ChannelStats":
        rows = _reader(stream)
        header = _read_header(rows, ("channel", "mean", "std"), "stats")
        names, means, stds = [], [], []
        for line, row in enumerate(rows, start=2):
            if not row:
                continue
            names.append(row[header.index("channel")])
            means.append(_float(row[header.index("mean")], line, "mean"))
            stds.append(_float(row[header.index("std")], line, "std"))
        return cls(tuple(names), tuple(means), tuple(stds))


def compute_stats(values: np.ndarray, names: Sequence[str] = WeatherSchema().names) -> ChannelStats:
    """Per-channel mean and population std, pooled over every leading axis.

    Channels with zero spread get std 1 so they normalize to all zeros.
    """
    arr = np.asarray(values, dtype=float).reshape(-1, len(names))
    mean = arr.mean(axis=0)
    std = np.sqrt(((arr - mean) ** 2).mean(axis=0))
    for c in np.flatnonzero(std == 0):
        warnings.warn(f"channel {names[c]!r} has zero variance; using std = 1", DataWarning, stacklevel=2)
        std[c] = 1.0
    return ChannelStats(tuple(names), tuple(mean.tolist()), tuple(std.tolist()))


def normalize(values: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """z-score the last axis (channels) with previously computed stats."""
    values = np.asarray(values, dtype=float)
    return (values - np.asarray(stats.mean)) / np.asarray(stats.std)


# --------------------------------------------------------------------------
# stations and distances


@dataclass(frozen=True)
class StationLocation:
    station_id: str
    lat: float
    lon: float

    def __post_init__(self):
        _check_coords(self.lat, self.lon)


def _check_coords(lat: float, lon: float, line: int | None = None):
    if not -90.0 <= lat <= 90.0 or not -180.0 <= lon <= 180.0:
        raise DataError(f"coordinates out of range: ({lat}, {lon})", line)


def parse_stations(stream: str | TextIO) -> list[StationLocation]:
    rows = _reader(stream)
    header = _read_header(rows, ("station", "lat", "lon"), "stations")
    ci = {c: header.index(c) for c in ("station", "lat", "lon")}
    out = []
    for line, row in enumerate(rows, start=2):
        if not row:
            continue
        lat = _float(row[ci["lat"]], line, "lat")
        lon = _float(row[ci["lon"]], line, "lon")
        _check_coords(lat, lon, line)
        out.append(StationLocation(row[ci["station"]].strip(), lat, lon))
    return out


def write_stations(stations: Iterable[StationLocation]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["station", "lat", "lon"])
    for s in stations:
        w.writerow([s.station_id, fmt_number(s.lat), fmt_number(s.lon)])
    return out.getvalue()


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in km; broadcasts over numpy arrays."""
    lat1, lon1, lat2, lon2 = map(np.radians, (lat1, lon1, lat2, lon2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def station_distances(centroid: tuple[float, float], stations: Sequence[StationLocation]) -> np.ndarray:
    """Distance in km from a tract centroid to each station, in station order."""
    lat, lon = centroid
    _check_coords(lat, lon)
    lats = np.array([s.lat for s in stations], dtype=float)
    lons = np.array([s.lon for s in stations], dtype=float)
    return haversine_km(lat, lon, lats, lons)


# --------------------------------------------------------------------------
# outages


@dataclass(frozen=True)
class OutageSnapshot:
    event_id: str
    observed_at: int      # minutes since epoch, UTC
    customers: int

    def __post_init__(self):
        if self.customers < 0:
            raise DataError(f"event {self.event_id}: negative customer count")


@dataclass(frozen=True)
class Allocation:
    event_id: str
    tract_id: str
    fraction: float


@dataclass(frozen=True)
class OutageEvent:
    event_id: str
    start_hour: int
    end_hour: int
    max_customers: int
    allocations: tuple[tuple[str, float], ...]


def parse_snapshots(stream: str | TextIO) -> list[OutageSnapshot]:
    rows = _reader(stream)
    header = _read_header(rows, ("event_id", "observed_at", "customers"), "outage snapshots")
    ci = {c: header.index(c) for c in ("event_id", "observed_at", "customers")}
    out = []
    for line, row in enumerate(rows, start=2):
        if not row:
            continue
        try:
            minutes = parse_minutes(row[ci["observed_at"]])
        except ValueError:
            raise DataError(f"bad timestamp {row[ci['observed_at']]!r}", line) from None
        customers = _int(row[ci["customers"]], line, "customers")
        if customers < 0:
            raise DataError("negative customer count", line)
        out.append(OutageSnapshot(row[ci["event_id"]].strip(), minutes, customers))
    return out


def write_snapshots(snapshots: Iterable[OutageSnapshot]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["event_id", "observed_at", "customers"])
    for s in snapshots:
        w.writerow([s.event_id, format_minutes(s.observed_at), s.customers])
    return out.getvalue()


def parse_allocations(stream: str | TextIO) -> list[Allocation]:
    rows = _reader(stream)
    header = _read_header(rows, ("event_id", "tract_id", "fraction"), "event allocations")
    ci = {c: header.index(c) for c in ("event_id", "tract_id", "fraction")}
    out = []
    for line, row in enumerate(rows, start=2):
        if not row:
            continue
        frac = _float(row[ci["fraction"]], line, "fraction")
        if not 0.0 < frac <= 1.0:
            raise DataError(f"allocation fraction {frac} outside (0, 1]", line)
        out.append(Allocation(row[ci["event_id"]].strip(), row[ci["tract_id"]].strip(), frac))
    return out


def write_allocations(allocations: Iterable[Allocation]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["event_id", "tract_id", "fraction"])
    for a in allocations:
        w.writerow([a.event_id, a.tract_id, repr(float(a.fraction))])
    return out.getvalue()


def consolidate_events(
    snapshots: Iterable[OutageSnapshot], allocation_table: Iterable[Allocation]
) -> list[OutageEvent]:
    """Collapse 15-minute snapshots into one record per event.

    Start and end are the floored hours of the first and last snapshot; the
    customer count is the peak over all snapshots. Events whose peak is at
    most one customer are dropped.
    """
    first: dict[str, int] = {}
    last: dict[str, int] = {}
    peak: dict[str, int] = {}
    for s in snapshots:
        if s.event_id not in first:
            first[s.event_id] = last[s.event_id] = s.observed_at
            peak[s.event_id] = s.customers
            continue
        first[s.event_id] = min(first[s.event_id], s.observed_at)
        last[s.event_id] = max(last[s.event_id], s.observed_at)
        peak[s.event_id] = max(peak[s.event_id], s.customers)

    alloc: dict[str, list[tuple[str, float]]] = {}
    for a in allocation_table:
        alloc.setdefault(a.event_id, []).append((a.tract_id, a.fraction))

    events = []
    for event_id in first:
        if peak[event_id] <= 1:
            continue
        parts = alloc.get(event_id)
        if not parts:
            warnings.warn(f"event {event_id} has no tract allocation; skipped", DataWarning, stacklevel=2)
            continue
        total = math.fsum(f for _, f in parts)
        if abs(total - 1.0) > 1e-6:
            warnings.warn(
                f"event {event_id}: allocation fractions sum to {total:.9g}; renormalized",
                DataWarning, stacklevel=2)
        if total != 1.0:
            parts = [(t, f / total) for t, f in parts]
        events.append(OutageEvent(
            event_id,
            first[event_id] // 60,
            last[event_id] // 60,
            peak[event_id],
            tuple(parts),
        ))
    return events


# --------------------------------------------------------------------------
# tracts


@dataclass(frozen=True)
class TractProfile:
    tract_id: str
    centroid: tuple[float, float]
    population: int
    households: int
    houses: int
    income_bins: tuple[tuple[float, float], ...]
    year_built_bins: tuple[tuple[float, float], ...]
    infra_counts: tuple[int, ...]
    infra_total: int = field(default=-1)

    def __post_init__(self):
        if self.infra_total == -1:
            object.__setattr__(self, "infra_total", int(sum(self.infra_counts)))
        if len(self.infra_counts) != len(INFRA_TYPES):
            raise DataError(f"tract {self.tract_id}: expected {len(INFRA_TYPES)} infrastructure counts")
        if self.infra_total != sum(self.infra_counts):
            raise DataError(f"tract {self.tract_id}: infra_total does not equal the sum of counts")
        if min(self.population, self.households, self.houses, *self.infra_counts) < 0:
            raise DataError(f"tract {self.tract_id}: negative count")
        for est, moe in (*self.income_bins, *self.year_built_bins):
            if est < 0 or moe < 0:
                raise DataError(f"tract {self.tract_id}: negative estimate or margin of error")
        _check_coords(*self.centroid)


def _numbered(header: Sequence[str], prefix: str) -> list[int]:
    idx, k = [], 1
    while f"{prefix}{k}" in header:
        idx.append(header.index(f"{prefix}{k}"))
        k += 1
    return idx


def parse_tracts(stream: str | TextIO) -> list[TractProfile]:
    """Read ``tracts.csv``; bin counts K are inferred from the numbered columns."""
    rows = _reader(stream)
    base = ("tract_id", "lat", "lon", "population", "households", "houses")
    header = _read_header(rows, base, "tracts")
    ci = {c: header.index(c) for c in base}
    inc_e, inc_m = _numbered(header, "inc_est_"), _numbered(header, "inc_moe_")
    yb_e, yb_m = _numbered(header, "yb_est_"), _numbered(header, "yb_moe_")
    infra = _numbered(header, "infra_")
    if len(inc_e) != len(inc_m) or not inc_e:
        raise FormatError("tracts: income estimate/margin columns missing or unpaired")
    if len(yb_e) != len(yb_m) or not yb_e:
        raise FormatError("tracts: year-built estimate/margin columns missing or unpaired")
    if len(infra) != len(INFRA_TYPES):
        raise FormatError(f"tracts: expected infra_1..infra_{len(INFRA_TYPES)}")
    out = []
    for line, row in enumerate(rows, start=2):
        if not row:
            continue

        def bins(est_cols, moe_cols):
            return tuple(
                (_float(row[e], line, header[e]), _float(row[m], line, header[m]))
                for e, m in zip(est_cols, moe_cols))

        lat = _float(row[ci["lat"]], line, "lat")
        lon = _float(row[ci["lon"]], line, "lon")
        _check_coords(lat, lon, line)
        try:
            out.append(TractProfile(
                tract_id=row[ci["tract_id"]].strip(),
                centroid=(lat, lon),
                population=_int(row[ci["population"]], line, "population"),
                households=_int(row[ci["households"]], line, "households"),
                houses=_int(row[ci["houses"]], line, "houses"),
                income_bins=bins(inc_e, inc_m),
                year_built_bins=bins(yb_e, yb_m),
                infra_counts=tuple(_int(row[i], line, header[i]) for i in infra),
            ))
        except DataError as exc:
            raise DataError(str(exc), line) from None
    return out


def write_tracts(tracts: Sequence[TractProfile]) -> str:
    if not tracts:
        raise DataError("no tracts to write")
    k_i, k_y = len(tracts[0].income_bins), len(tracts[0].year_built_bins)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow([
        "tract_id", "lat", "lon", "population", "households", "houses",
        *(f"inc_est_{k}" for k in range(1, k_i + 1)), *(f"inc_moe_{k}" for k in range(1, k_i + 1)),
        *(f"yb_est_{k}" for k in range(1, k_y + 1)), *(f"yb_moe_{k}" for k in range(1, k_y + 1)),
        *(f"infra_{k}" for k in range(1, len(INFRA_TYPES) + 1)),
    ])
    for t in tracts:
        w.writerow([
            t.tract_id, fmt_number(t.centroid[0]), fmt_number(t.centroid[1]),
            t.population, t.households, t.houses,
            *(fmt_number(e) for e, _ in t.income_bins), *(fmt_number(m) for _, m in t.income_bins),
            *(fmt_number(e) for e, _ in t.year_built_bins), *(fmt_number(m) for _, m in t.year_built_bins),
            *t.infra_counts,
        ])
    return out.getvalue()
