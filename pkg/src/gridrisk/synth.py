"""Synthetic study area with a known outage process.

Storms raise wind (and gusts, precipitation, pressure drop, ...) at every
station. A tract's true hourly outage probability is

    p = sigmoid(wind_coef * storm_wind + fragility_coef * fragility - intercept)

where ``storm_wind`` is the inverse-distance-weighted storm wind anomaly
(in units of ``WIND_UNIT_KT``) and ``fragility`` is a standardized linear
functional of the tract's year-built and infrastructure distributions, as the
models see them. Affected customers are binomial draws; they are written out
as 15-minute snapshots, events and allocation fractions in the ingest formats.
The true probabilities go to ``truth.csv`` and are never read by training.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, fields, replace
from typing import Mapping

import numpy as np

from .errors import ConfigError
from .evaluation import rmse, threshold
from .features import _simplex
from .ingest import (
    INFRA_TYPES, Allocation, OutageSnapshot, StationLocation, TractProfile, WeatherObservation,
    WeatherSchema, format_hour, parse_hour, station_distances, write_allocations, write_snapshots,
    write_stations, write_tracts, write_weather,
)

WIND_UNIT_KT = 5.0
# bounding box of the study area (lat, lon)
AREA = ((42.05, 42.65), (-83.65, -82.95))

# year-built bins run oldest -> newest
DEFAULT_YEAR_WEIGHTS = (1.0, 0.75, 0.5, 0.25, 0.0, -0.25, -0.5, -0.75, -1.0)
DEFAULT_INFRA_WEIGHTS = {"pole": 1.0, "line": 0.5, "insulator": 0.5, "tower": -0.5}
# per-bin Dirichlet scale; large values keep bin shares close to the tract's latent tilt
DIRICHLET_CONCENTRATION = 40.0

FILES = ("weather.csv", "stations.csv", "tracts.csv", "outage_snapshots.csv", "event_allocations.csv")


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    n_tracts: int = 60
    n_stations: int = 4
    n_hours: int = 2000
    storm_rate: float = 5.0            # storms per 1000 hours
    storm_min_hours: int = 3
    storm_max_hours: int = 8
    wind_coef: float = 2.0
    fragility_coef: float = 0.5
    intercept: float = 12.0
    fragility_weights: tuple[float, ...] = ()   # year-built then infra; empty = defaults
    k_income: int = 10
    k_year: int = 9
    min_population: int = 300
    max_population: int = 3000
    missing_rate: float = 0.01
    absent_rate: float = 0.005
    start: str = "2023-02-27T00:00"

    def __post_init__(self):
        if min(self.n_tracts, self.n_stations, self.n_hours, self.k_income, self.k_year) < 1:
            raise ConfigError("world sizes must be positive")
        if self.storm_rate < 0 or not 1 <= self.storm_min_hours <= self.storm_max_hours:
            raise ConfigError("invalid storm settings")
        if not 0 < self.min_population <= self.max_population:
            raise ConfigError("invalid population range")
        if self.fragility_weights and len(self.fragility_weights) != self.k_year + len(INFRA_TYPES):
            raise ConfigError(f"fragility_weights needs {self.k_year + len(INFRA_TYPES)} entries")

    @property
    def target_outage_fraction(self) -> float:
        """Expected share of storm hours, which the outage-hour share tracks."""
        mean_len = (self.storm_min_hours + self.storm_max_hours) / 2
        return min(1.0, self.storm_rate * mean_len / 1000.0)

    def weights(self) -> tuple[np.ndarray, np.ndarray]:
        if self.fragility_weights:
            w = np.asarray(self.fragility_weights, dtype=float)
            return w[:self.k_year], w[self.k_year:]
        year = np.interp(np.linspace(0, 1, self.k_year), np.linspace(0, 1, len(DEFAULT_YEAR_WEIGHTS)),
                         DEFAULT_YEAR_WEIGHTS)
        infra = np.array([DEFAULT_INFRA_WEIGHTS.get(n, 0.0) for n in INFRA_TYPES])
        return year, infra

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "WorldSpec":
        known = {f.name: f for f in fields(cls)}
        base = cls()
        updates = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown world setting {key!r}")
            current = getattr(base, key)
            try:
                if isinstance(current, int):
                    updates[key] = int(value)
                elif isinstance(current, float):
                    updates[key] = float(value)
                elif isinstance(current, tuple):
                    updates[key] = tuple(float(v) for v in value.split(",") if v.strip())
                else:
                    updates[key] = value
            except ValueError:
                raise ConfigError(f"bad value for {key!r}: {value!r}") from None
        return replace(base, **updates)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


@dataclass
class World:
    spec: WorldSpec
    files: dict[str, str]           # file name -> CSV text
    tract_ids: list[str]
    hours: np.ndarray               # (H,)
    p_true: np.ndarray              # (T, H)
    customers: np.ndarray           # (T, H) binomial draws
    fragility: np.ndarray           # (T,)

    def truth_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["tract_id", "hour", "p_true"])
        for i, t in enumerate(self.tract_ids):
            for j, h in enumerate(self.hours):
                w.writerow([t, int(h), repr(float(self.p_true[i, j]))])
        return out.getvalue()

    def write(self, out_dir: str, truth: bool = True):
        os.makedirs(out_dir, exist_ok=True)
        for name, text in self.files.items():
            with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        if truth:
            with open(os.path.join(out_dir, "truth.csv"), "w", encoding="utf-8", newline="") as fh:
                fh.write(self.truth_csv())


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def _storm_intensity(spec: WorldSpec, rng: np.random.Generator) -> np.ndarray:
    """Hourly storm intensity in [0, ~1.3]: raised-cosine bursts of random length."""
    n_h = spec.n_hours
    n_storms = int(round(spec.storm_rate * n_h / 1000.0))
    intensity = np.zeros(n_h)
    for _ in range(n_storms):
        length = int(rng.integers(spec.storm_min_hours, spec.storm_max_hours + 1))
        start = int(rng.integers(0, max(n_h - length, 1)))
        amp = rng.uniform(0.8, 1.25)
        shape = np.sin(np.pi * (np.arange(length) + 0.5) / length) ** 0.5
        seg = slice(start, min(start + length, n_h))
        intensity[seg] = np.maximum(intensity[seg], amp * shape[:seg.stop - seg.start])
    return intensity


def _tracts(spec: WorldSpec, rng: np.random.Generator) -> list[TractProfile]:
    (lat0, lat1), (lon0, lon1) = AREA
    out = []
    for i in range(spec.n_tracts):
        pop = int(rng.integers(spec.min_population, spec.max_population + 1))
        households = max(1, int(round(pop / rng.uniform(2.2, 2.8))))
        houses = max(1, int(round(households * rng.uniform(1.02, 1.15))))

        wealth = rng.uniform(-1.0, 1.0)
        alpha = DIRICHLET_CONCENTRATION * np.exp(wealth * np.linspace(-1, 1, spec.k_income))
        inc = np.round(rng.dirichlet(alpha) * households)
        inc_moe = np.round(inc * rng.uniform(0.05, 0.15, spec.k_income)) + 1

        age = rng.uniform(-1.5, 1.5)
        alpha = DIRICHLET_CONCENTRATION * np.exp(age * np.linspace(1, -1, spec.k_year))
        yb = np.round(rng.dirichlet(alpha) * houses)
        yb_moe = np.round(yb * rng.uniform(0.03, 0.1, spec.k_year)) + 1

        overhead = rng.uniform(0.0, 1.0)
        size = pop / 1000.0
        rates = {
            "compensator": 0.2, "generator": 0.5, "insulator": 10 + 60 * overhead, "line": 5 + 40 * overhead,
            "pole": 20 + 200 * overhead, "portal": 0.5, "substation": 1.5 * (1.2 - overhead), "switch": 2.0,
            "terminal": 1.0, "tower": 2 + 10 * (1 - overhead), "transformer": 10 + 30 * overhead,
        }
        infra = tuple(int(rng.poisson(rates[n] * size)) for n in INFRA_TYPES)

        out.append(TractProfile(
            tract_id=f"T{i:04d}",
            centroid=(round(rng.uniform(lat0, lat1), 5), round(rng.uniform(lon0, lon1), 5)),
            population=pop, households=households, houses=houses,
            income_bins=tuple(zip(inc.tolist(), inc_moe.tolist())),
            year_built_bins=tuple(zip(yb.tolist(), yb_moe.tolist())),
            infra_counts=infra,
        ))
    return out


def fragility_scores(tracts, spec: WorldSpec) -> np.ndarray:
    """Standardized fragility per tract from the raw year-built and infrastructure simplices."""
    w_year, w_infra = spec.weights()
    raw = np.array([
        w_year @ _simplex(np.array([e for e, _ in t.year_built_bins], dtype=float))
        + w_infra @ _simplex(np.array(t.infra_counts, dtype=float))
        for t in tracts])
    if len(raw) < 2 or raw.std() == 0:
        return np.zeros_like(raw)
    return (raw - raw.mean()) / raw.std()


def _weather(spec, rng, stations, intensity, schema):
    """Per-station channel matrix (H, S, 10) plus storm wind anomaly (H, S) in kt."""
    n_h, n_s = spec.n_hours, len(stations)
    hours = np.arange(n_h)
    day = 2 * np.pi * hours / 24.0
    season = 2 * np.pi * hours / (24.0 * 365.0)
    storm_wind = np.repeat(25.0 * intensity[:, None], n_s, axis=1)

    def ar(scale, rho=0.8):
        x = np.zeros((n_h, n_s))
        eps = rng.normal(0.0, scale, (n_h, n_s))
        for h in range(1, n_h):
            x[h] = rho * x[h - 1] + eps[h]
        return x

    I = np.repeat(intensity[:, None], n_s, axis=1)
    sknt = np.maximum(0.0, 8.0 + 2.0 * np.sin(day - 2.0)[:, None] + ar(1.2) + storm_wind)
    gust = np.where(sknt > 14.0, sknt * 1.35 + rng.normal(0, 1.0, (n_h, n_s)), np.nan)
    tmpc = (2.0 + 12.0 * np.sin(season)[:, None] + 5.0 * np.sin(day - 2.0)[:, None]
            + rng.normal(0, 1.0, n_s)[None, :] + ar(0.6) - 3.0 * I)
    relh = np.clip(65.0 + 12.0 * np.sin(day + 1.0)[:, None] + ar(3.0) + 25.0 * I, 10.0, 100.0)
    alti = 29.92 + ar(0.03, 0.95) - 0.45 * I
    drct = np.mod(200.0 + np.cumsum(rng.normal(0, 12.0, (n_h, n_s)), axis=0), 360.0)
    vsby = np.clip(10.0 - 8.0 * I + ar(0.5), 0.25, 10.0)
    p01i = np.round(np.maximum(0.0, 0.25 * I + rng.normal(0, 0.02, (n_h, n_s))) * (I > 0.05), 2)
    dwpc = tmpc - (100.0 - relh) / 5.0
    skyc = np.clip(0.35 + 0.6 * I + ar(0.08), 0.0, 1.0)
    channels = {"tmpc": tmpc, "relh": relh, "alti": alti, "sknt": sknt, "drct": drct, "gust": gust,
                "vsby": vsby, "p01i": p01i, "dwpc": dwpc, "skyc": skyc}
    values = np.stack([np.round(channels[n], 2) for n in schema.names], axis=-1)
    return values, storm_wind


def generate_world(spec: WorldSpec = WorldSpec(), schema: WeatherSchema = WeatherSchema()) -> World:
    rng = np.random.default_rng(spec.seed)
    h0 = parse_hour(spec.start)
    hours = h0 + np.arange(spec.n_hours)

    (lat0, lat1), (lon0, lon1) = AREA
    stations = [StationLocation(f"S{j:02d}", round(rng.uniform(lat0, lat1), 4), round(rng.uniform(lon0, lon1), 4))
                for j in range(spec.n_stations)]
    tracts = _tracts(spec, rng)
    intensity = _storm_intensity(spec, rng)
    values, storm_wind = _weather(spec, rng, stations, intensity, schema)

    # hidden outage process
    dist = np.stack([station_distances(t.centroid, stations) for t in tracts])       # (T, S)
    idw = 1.0 / (dist + 5.0) ** 2
    idw /= idw.sum(axis=1, keepdims=True)
    wind_index = idw @ storm_wind.T / WIND_UNIT_KT                                    # (T, H)
    fragility = fragility_scores(tracts, spec)
    logit = spec.wind_coef * wind_index + spec.fragility_coef * fragility[:, None] - spec.intercept
    p_true = _sigmoid(logit)
    pop = np.array([t.population for t in tracts])
    customers = rng.binomial(pop[:, None], p_true)

    # weather file with gaps
    obs = []
    absent = rng.random((spec.n_hours, spec.n_stations)) < spec.absent_rate
    blank = rng.random(values.shape) < spec.missing_rate
    for i, hour in enumerate(hours):
        for j, st in enumerate(stations):
            if absent[i, j]:
                continue
            row = values[i, j]
            mask = tuple(bool(blank[i, j, c] or np.isnan(row[c])) for c in range(len(schema.names)))
            obs.append(WeatherObservation(st.station_id, int(hour),
                                          tuple(0.0 if m else float(v) for v, m in zip(row, mask)), mask))

    # outages: tracts are paired into feeders; one event per feeder-hour with customers out
    order = rng.permutation(spec.n_tracts)
    feeders = [order[k:k + 2] for k in range(0, spec.n_tracts, 2)]
    snapshots, allocations = [], []
    n_event = 0
    for j, hour in enumerate(hours):
        for feeder in feeders:
            counts = customers[feeder, j]
            total = int(counts.sum())
            if total == 0:
                continue
            n_event += 1
            eid = f"E{n_event:07d}"
            n_snap = int(rng.integers(1, 5))
            minutes = np.sort(rng.choice(4, size=n_snap, replace=False)) * 15
            seen = rng.integers(max(total // 2, 1), total + 1, size=n_snap)
            seen[rng.integers(n_snap)] = total
            for m, c in zip(minutes, seen):
                snapshots.append(OutageSnapshot(eid, int(hour) * 60 + int(m), int(c)))
            for i in feeder:
                if customers[i, j] > 0:
                    allocations.append(Allocation(eid, tracts[i].tract_id, customers[i, j] / total))

    files = {
        "weather.csv": write_weather(obs, schema),
        "stations.csv": write_stations(stations),
        "tracts.csv": write_tracts(tracts),
        "outage_snapshots.csv": write_snapshots(snapshots),
        "event_allocations.csv": write_allocations(allocations),
    }
    return World(spec, files, [t.tract_id for t in tracts], hours, p_true, customers, fragility)


def read_truth(stream) -> dict[tuple[str, int], float]:
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    rows = csv.reader(stream)
    next(rows)
    return {(r[0], int(r[1])): float(r[2]) for r in rows if r}


def bayes_rmse(p_true, realized) -> float:
    """RMSE of the thresholded true probability against realized targets."""
    return rmse(realized, threshold(p_true))


def describe_hours(world: World) -> str:
    return f"{format_hour(int(world.hours[0]))} .. {format_hour(int(world.hours[-1]))}"
