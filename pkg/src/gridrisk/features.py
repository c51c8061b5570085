"""Targets, condition vectors and sample assembly for (tract, hour) pairs."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, fields
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .ingest import DataWarning, OutageEvent, TractProfile, fmt_number

# distances enter the base vector in units of 100 km
DISTANCE_SCALE_KM = 100.0

GROUPS = ("weather", "distance", "totals", "income", "year_built", "power_infra")


@dataclass(frozen=True)
class FeatureMask:
    weather: bool = True
    distance: bool = True
    totals: bool = True
    income: bool = True
    year_built: bool = True
    power_infra: bool = True

    def __post_init__(self):
        if not self.weather:
            raise ConfigError("the weather group cannot be disabled")

    @classmethod
    def from_names(cls, names: str | Iterable[str]) -> "FeatureMask":
        if isinstance(names, str):
            names = [n.strip() for n in names.split(",") if n.strip()]
        names = set(names)
        unknown = names - set(GROUPS)
        if unknown:
            raise ConfigError(f"unknown feature group(s): {', '.join(sorted(unknown))}")
        return cls(**{g: g in names or g == "weather" for g in GROUPS})

    def names(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name)]

    def describe(self) -> str:
        return "+".join(self.names())


# nested order used by the ablation study
LADDER = tuple(FeatureMask.from_names(GROUPS[:k]) for k in range(1, len(GROUPS) + 1))


@dataclass(frozen=True)
class HourlySample:
    tract_id: str
    hour: int
    base: np.ndarray
    condition: np.ndarray
    target: float


# --------------------------------------------------------------------------
# targets


def build_targets(
    events: Sequence[OutageEvent],
    tracts: Sequence[TractProfile],
    hour_range: tuple[int, int],
) -> np.ndarray:
    """Hourly outage probability per tract.

    Every hour an event is active, each allocated tract gains
    ``max_customers * fraction`` affected customers (overlapping events add
    up). The hourly count divided by population, clipped to 1, is the target.

    Returns:
        array of shape (n_tracts, n_hours) in the order of ``tracts``, hours
        ``hour_range[0] .. hour_range[1]`` inclusive.
    """
    h0, h1 = hour_range
    n_h = h1 - h0 + 1
    index = {t.tract_id: i for i, t in enumerate(tracts)}
    counts = np.zeros((len(tracts), n_h))
    unknown = set()
    for ev in events:
        lo, hi = max(ev.start_hour, h0), min(ev.end_hour, h1)
        if lo > hi:
            continue
        for tract_id, frac in ev.allocations:
            i = index.get(tract_id)
            if i is None:
                unknown.add(tract_id)
                continue
            counts[i, lo - h0:hi - h0 + 1] += ev.max_customers * frac
    if unknown:
        warnings.warn(f"allocations reference {len(unknown)} unknown tract(s); ignored", DataWarning, stacklevel=2)

    pop = np.array([t.population for t in tracts], dtype=float)
    targets = np.zeros_like(counts)
    ok = pop > 0
    targets[ok] = np.minimum(counts[ok] / pop[ok, None], 1.0)
    orphan = ~ok[:, None] & (counts > 0)
    if orphan.any():
        warnings.warn("outages in zero-population tract(s); target set to 1", DataWarning, stacklevel=2)
        targets[orphan] = 1.0
    return targets


# --------------------------------------------------------------------------
# condition features


def augment_distribution(bins: Sequence[tuple[float, float]], rng: np.random.Generator) -> np.ndarray:
    """Draw each bin uniformly from estimate +/- margin of error, floored at 0."""
    arr = np.asarray(bins, dtype=float).reshape(-1, 2)
    est, moe = arr[:, 0], arr[:, 1]
    return np.maximum(rng.uniform(est - moe, est + moe), 0.0)


def softmax_normalize(bins: Sequence[float], total: float) -> np.ndarray:
    bins = np.asarray(bins, dtype=float)
    if total <= 0:
        warnings.warn("non-positive block total; using a uniform distribution", DataWarning, stacklevel=2)
        logits = np.zeros_like(bins)
    else:
        logits = bins / total
    e = np.exp(logits - logits.max())
    return e / e.sum()


def _simplex(values: np.ndarray) -> np.ndarray:
    return softmax_normalize(values, float(values.sum()))


def condition_vector(tract: TractProfile, mask: FeatureMask, rng: np.random.Generator | None = None) -> np.ndarray:
    """Concatenate the enabled condition groups for one tract.

    Order: income simplex, year-built simplex, infrastructure simplex, then
    log1p of (population, households, houses, infra_total). With ``rng`` the
    income and year-built bins are resampled within their margins of error.
    """
    parts = []
    if mask.income:
        est = augment_distribution(tract.income_bins, rng) if rng is not None else \
            np.array([e for e, _ in tract.income_bins], dtype=float)
        parts.append(_simplex(est))
    if mask.year_built:
        est = augment_distribution(tract.year_built_bins, rng) if rng is not None else \
            np.array([e for e, _ in tract.year_built_bins], dtype=float)
        parts.append(_simplex(est))
    if mask.power_infra:
        parts.append(_simplex(np.array(tract.infra_counts, dtype=float)))
    if mask.totals:
        parts.append(np.log1p(np.array(
            [tract.population, tract.households, tract.houses, tract.infra_total], dtype=float)))
    return np.concatenate(parts) if parts else np.zeros(0)


def condition_dim(mask: FeatureMask, k_income: int, k_year: int) -> int:
    return (k_income * mask.income + k_year * mask.year_built
            + 11 * mask.power_infra + 4 * mask.totals)


def assemble_sample(
    tract: TractProfile,
    hour: int,
    weather_slice: np.ndarray,
    distances: np.ndarray,
    mask: FeatureMask,
    rng: np.random.Generator | None = None,
    target: float = 0.0,
) -> HourlySample:
    """Build one training record.

    Args:
        weather_slice: normalized channels for this hour, shape (S, 10) or (S*10,).
        distances: km from the tract to each of the S stations.
        rng: pass a generator to apply margin-of-error augmentation.
    """
    weather = np.asarray(weather_slice, dtype=float)
    distances = np.asarray(distances, dtype=float)
    if weather.ndim == 2:
        if weather.shape[1] != 10:
            raise ConfigError(f"weather slice has {weather.shape[1]} channels, expected 10")
        weather = weather.reshape(-1)
    if weather.size != 10 * distances.size:
        raise ConfigError(
            f"weather slice covers {weather.size // 10} stations but {distances.size} distances were given")
    base = [weather]
    if mask.distance:
        base.append(distances / DISTANCE_SCALE_KM)
    return HourlySample(tract.tract_id, int(hour), np.concatenate(base),
                        condition_vector(tract, mask, rng), float(target))


@dataclass(frozen=True)
class ConditionScaler:
    """Column-wise standardization of condition vectors, fit on training tracts."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def fit(cls, rows: np.ndarray) -> "ConditionScaler":
        rows = np.asarray(rows, dtype=float)
        if rows.shape[1] == 0:
            return cls((), ())
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        std[std == 0] = 1.0
        return cls(tuple(mean.tolist()), tuple(std.tolist()))

    def apply(self, cond: np.ndarray) -> np.ndarray:
        cond = np.asarray(cond, dtype=float)
        if not self.mean:
            return cond
        return (cond - np.asarray(self.mean)) / np.asarray(self.std)

    def to_text(self) -> str:
        return ";".join(f"{m!r}:{s!r}" for m, s in zip(self.mean, self.std))

    @classmethod
    def from_text(cls, text: str) -> "ConditionScaler":
        pairs = [p.split(":") for p in text.split(";") if p]
        return cls(tuple(float(m) for m, _ in pairs), tuple(float(s) for _, s in pairs))


# --------------------------------------------------------------------------
# dataset


@dataclass
class Dataset:
    """All (tract, hour) samples for one mask, stored factorized.

    Weather is shared across tracts and conditions across hours, so base and
    condition rows are gathered per batch instead of being materialized.
    """

    tracts: list[TractProfile]
    hours: np.ndarray           # (H,)
    weather: np.ndarray         # (H, S*10), normalized
    distances: np.ndarray       # (T, S), km
    targets: np.ndarray         # (T, H)
    mask: FeatureMask

    def __post_init__(self):
        t, h = self.targets.shape
        if t != len(self.tracts) or h != len(self.hours) or self.weather.shape[0] != h:
            raise ConfigError("dataset arrays disagree on tract/hour counts")
        if self.weather.shape[1] != 10 * self.distances.shape[1]:
            raise ConfigError("weather columns do not match the station count")
        k_i = {len(tr.income_bins) for tr in self.tracts}
        k_y = {len(tr.year_built_bins) for tr in self.tracts}
        if len(k_i) > 1 or len(k_y) > 1:
            raise DataError("tracts disagree on income/year-built bin counts")

    @property
    def tract_ids(self) -> list[str]:
        return [t.tract_id for t in self.tracts]

    @property
    def base_dim(self) -> int:
        return self.weather.shape[1] + (self.distances.shape[1] if self.mask.distance else 0)

    @property
    def cond_dim(self) -> int:
        tr = self.tracts[0]
        return condition_dim(self.mask, len(tr.income_bins), len(tr.year_built_bins))

    def with_mask(self, mask: FeatureMask) -> "Dataset":
        return Dataset(self.tracts, self.hours, self.weather, self.distances, self.targets, mask)

    def conditions(self, rng_for: Callable[[int], np.random.Generator | None] | None = None) -> np.ndarray:
        """(T, C) condition matrix; ``rng_for(i)`` supplies tract i's augmentation stream."""
        rows = [condition_vector(t, self.mask, rng_for(i) if rng_for else None)
                for i, t in enumerate(self.tracts)]
        return np.stack(rows) if rows else np.zeros((0, self.cond_dim))

    def base(self, t_idx: np.ndarray, h_idx: np.ndarray) -> np.ndarray:
        if not self.mask.distance:
            return self.weather[h_idx]
        return np.concatenate([self.weather[h_idx], self.distances[t_idx] / DISTANCE_SCALE_KM], axis=1)

    def index(self, tract_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """All (tract, hour) index pairs for the given tract rows, tract-major."""
        tract_rows = np.asarray(tract_rows, dtype=int)
        n_h = len(self.hours)
        return np.repeat(tract_rows, n_h), np.tile(np.arange(n_h), len(tract_rows))

    def sample(self, i: int, j: int, rng: np.random.Generator | None = None) -> HourlySample:
        n_s = self.distances.shape[1]
        return assemble_sample(self.tracts[i], int(self.hours[j]), self.weather[j].reshape(n_s, 10),
                               self.distances[i], self.mask, rng, float(self.targets[i, j]))


def write_samples(ds: Dataset) -> tuple[str, str]:
    """Render ``samples.csv`` and its ``schema.txt`` sidecar (no augmentation)."""
    cond = ds.conditions()
    b, c = ds.base_dim, ds.cond_dim
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["tract_id", "hour", "target", *(f"base_{k}" for k in range(b)), *(f"cond_{k}" for k in range(c))])
    all_h = np.arange(len(ds.hours))
    for i, tract in enumerate(ds.tracts):
        base = ds.base(np.full(len(all_h), i), all_h)
        for j in all_h:
            w.writerow([tract.tract_id, int(ds.hours[j]), repr(float(ds.targets[i, j])),
                        *(repr(float(v)) for v in base[j]), *(repr(float(v)) for v in cond[i])])
    schema = f"mask = {ds.mask.describe()}\nbase_columns = {b}\ncond_columns = {c}\n"
    return out.getvalue(), schema


# --------------------------------------------------------------------------
# split

SPLITS = ("train", "val", "test")


def split_tracts(tract_ids: Sequence[str], seed: int) -> dict[str, str]:
    """Seeded 72/8/20 partition of tracts into train/val/test.

    Sizes are floored with the remainder going to train. If that leaves the
    validation set empty, one training tract is moved into it.
    """
    n = len(tract_ids)
    if n < 10:
        raise DataError(f"need at least 10 tracts to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_val, n_test = n * 8 // 100, n * 20 // 100
    n_train = n - n_val - n_test
    if n_val == 0:
        n_val, n_train = 1, n_train - 1
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    return {tract_ids[k]: lab for k, lab in zip(order, labels)}


def targets_to_map(targets: np.ndarray, tracts: Sequence[TractProfile], hour0: int) -> dict[tuple[str, int], float]:
    return {(t.tract_id, hour0 + j): float(targets[i, j])
            for i, t in enumerate(tracts) for j in range(targets.shape[1])}


def format_targets(targets: np.ndarray, tracts: Sequence[TractProfile], hour0: int) -> str:
    """Sparse ``targets.csv``: only nonzero (tract, hour) entries."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["tract_id", "hour", "target"])
    for i, j in zip(*np.nonzero(targets)):
        w.writerow([tracts[i].tract_id, hour0 + int(j), fmt_number(targets[i, j])])
    return out.getvalue()
