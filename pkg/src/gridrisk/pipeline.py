"""Load a data directory in the ingest formats and build a training dataset."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .features import Dataset, FeatureMask, build_targets
from .ingest import (
    ChannelStats, OutageEvent, StationLocation, TractProfile, WeatherGrid, WeatherSchema,
    compute_stats, consolidate_events, fill_missing, normalize, parse_allocations,
    parse_snapshots, parse_stations, parse_tracts, parse_weather, station_distances,
)


@dataclass
class Prepared:
    stations: list[StationLocation]
    tracts: list[TractProfile]
    grid: WeatherGrid                # filled, raw units
    stats: ChannelStats
    events: list[OutageEvent]
    targets: np.ndarray              # (T, H)

    def dataset(self, mask: FeatureMask = FeatureMask(), stats: ChannelStats | None = None) -> Dataset:
        """Samples under ``mask``; ``stats`` overrides the normalization computed here."""
        return Dataset(self.tracts, self.grid.hours, weather_matrix(self.grid, stats or self.stats),
                       distance_matrix(self.tracts, self.stations), self.targets, mask)


def _read(path: str) -> str:
    with open(path, encoding="utf-8", newline="") as fh:
        return fh.read()


def weather_matrix(grid: WeatherGrid, stats: ChannelStats) -> np.ndarray:
    """Normalized (H, S*10) weather block."""
    return normalize(grid.values, stats).reshape(len(grid.hours), -1)


def distance_matrix(tracts, stations) -> np.ndarray:
    return np.stack([station_distances(t.centroid, stations) for t in tracts])


def prepare(data_dir: str, schema: WeatherSchema = WeatherSchema()) -> Prepared:
    """Parse, clean and align the five input files in ``data_dir``.

    The tract split is spatial, so every weather hour belongs to training and
    the normalization statistics use all of them.
    """
    stations = parse_stations(_read(os.path.join(data_dir, "stations.csv")))
    tracts = parse_tracts(_read(os.path.join(data_dir, "tracts.csv")))
    observations = parse_weather(_read(os.path.join(data_dir, "weather.csv")), schema)
    grid = fill_missing(observations, schema, [s.station_id for s in stations])
    stats = compute_stats(grid.values, schema.names)
    events = consolidate_events(
        parse_snapshots(_read(os.path.join(data_dir, "outage_snapshots.csv"))),
        parse_allocations(_read(os.path.join(data_dir, "event_allocations.csv"))),
    )
    targets = build_targets(events, tracts, (int(grid.hours[0]), int(grid.hours[-1])))
    return Prepared(stations, tracts, grid, stats, events, targets)
