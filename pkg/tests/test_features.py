"""Targets, condition features, sample layout and the tract split."""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_tract
from gridrisk.errors import ConfigError, DataError
from gridrisk.features import (
    GROUPS, LADDER, ConditionScaler, Dataset, FeatureMask, assemble_sample, augment_distribution,
    build_targets, condition_dim, condition_vector, softmax_normalize, split_tracts, write_samples,
)
from gridrisk.ingest import DataWarning, OutageEvent


def _event(eid, start, end, customers, parts):
    return OutageEvent(eid, start, end, customers, tuple(parts))


# --------------------------------------------------------------------------
# targets


def test_target_clipped_at_one():
    tr = [make_tract("T1", population=100)]
    t = build_targets([_event("E", 0, 0, 150, [("T1", 1.0)])], tr, (0, 0))
    assert t[0, 0] == 1.0


def test_target_ratio():
    tr = [make_tract("T1", population=200)]
    assert build_targets([_event("E", 0, 0, 50, [("T1", 1.0)])], tr, (0, 0))[0, 0] == 0.25


def test_overlapping_events_sum():
    tr = [make_tract("T1", population=400)]
    evs = [_event("A", 0, 2, 30, [("T1", 1.0)]), _event("B", 1, 1, 20, [("T1", 1.0)])]
    t = build_targets(evs, tr, (0, 3))
    assert t[0].tolist() == [0.075, 0.125, 0.075, 0.0]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 12), st.integers(0, 5), st.integers(2, 500),
                          st.floats(0.05, 1.0)), min_size=0, max_size=8),
       st.integers(1, 800))
def test_targets_match_hourly_accumulation(raw, pop):
    # oracle: brute-force loop over hours, then divide and clip
    tr = [make_tract("T1", population=pop), make_tract("T2", population=pop + 7)]
    evs = [_event(f"E{k}", s, s + d, c, [("T1", f), ("T2", 1 - f)] if f < 1 else [("T1", 1.0)])
           for k, (s, d, c, f) in enumerate(raw)]
    got = build_targets(evs, tr, (0, 20))
    for i, t in enumerate(tr):
        for h in range(21):
            count = sum(ev.max_customers * fr for ev in evs if ev.start_hour <= h <= ev.end_hour
                        for tid, fr in ev.allocations if tid == t.tract_id)
            assert math.isclose(got[i, h], min(count / t.population, 1.0), rel_tol=1e-12, abs_tol=1e-15)
    assert got.min() >= 0 and got.max() <= 1


def test_allocations_sum_to_max_customers():
    ev = _event("E", 0, 0, 90, [("A", 0.2), ("B", 0.3), ("C", 0.5)])
    tr = [make_tract(k, population=10_000) for k in "ABC"]
    t = build_targets([ev], tr, (0, 0))
    assert abs((t[:, 0] * 10_000).sum() - 90) < 1e-6


def test_zero_population_outage_warns():
    tr = [make_tract("T1", population=0)]
    with pytest.warns(DataWarning):
        t = build_targets([_event("E", 0, 0, 5, [("T1", 1.0)])], tr, (0, 0))
    assert t[0, 0] == 1.0


# --------------------------------------------------------------------------
# augmentation and softmax


def test_zero_margin_is_identity(rng):
    bins = [(3.0, 0.0), (7.0, 0.0)]
    assert augment_distribution(bins, rng).tolist() == [3.0, 7.0]


def test_augmentation_bounds(rng):
    draws = np.array([augment_distribution([(10.0, 4.0), (1.0, 5.0)], rng) for _ in range(10_000)])
    assert draws[:, 0].min() >= 6 and draws[:, 0].max() <= 14
    assert draws[:, 1].min() >= 0 and draws[:, 1].max() <= 6
    # flooring puts mass exactly at zero
    assert (draws[:, 1] == 0).mean() > 0.3


def test_softmax_uniform_and_peaked():
    assert np.allclose(softmax_normalize([5, 5, 5, 5], 20), 0.25, atol=1e-15)
    e = math.e
    expected = [e / (e + 2), 1 / (e + 2), 1 / (e + 2)]
    got = softmax_normalize([9.0, 0.0, 0.0], 9.0)
    assert np.allclose(got, expected, rtol=1e-12)
    assert np.allclose(got, [0.576, 0.212, 0.212], atol=1e-3)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=15))
def test_softmax_is_a_simplex(bins):
    total = sum(bins)
    if total <= 0:
        with pytest.warns(DataWarning):
            p = softmax_normalize(bins, total)
    else:
        p = softmax_normalize(bins, total)
    assert np.all(p > 0)
    assert abs(p.sum() - 1) < 1e-12


# --------------------------------------------------------------------------
# sample layout


def test_weather_only_has_empty_condition():
    s = assemble_sample(make_tract(), 0, np.zeros((5, 10)), np.ones(5), FeatureMask.from_names("weather"))
    assert s.condition.shape == (0,)
    assert s.base.shape == (50,)


def test_full_mask_lengths():
    tract = make_tract(k_income=10, k_year=9)
    s = assemble_sample(tract, 0, np.zeros((5, 10)), np.ones(5), FeatureMask())
    assert s.base.shape == (55,)
    assert s.condition.shape == (10 + 9 + 11 + 4,)
    assert condition_dim(FeatureMask(), 10, 9) == 34


def test_condition_is_hour_independent():
    tract = make_tract()
    a = assemble_sample(tract, 3, np.zeros((2, 10)), np.ones(2), FeatureMask())
    b = assemble_sample(tract, 9, np.ones((2, 10)), np.ones(2), FeatureMask())
    assert np.array_equal(a.condition, b.condition)


def test_assemble_rejects_mismatch():
    with pytest.raises(ConfigError):
        assemble_sample(make_tract(), 0, np.zeros((3, 10)), np.ones(2), FeatureMask())


def test_distance_scaled():
    s = assemble_sample(make_tract(), 0, np.zeros((2, 10)), np.array([100.0, 250.0]),
                        FeatureMask.from_names("weather,distance"))
    assert s.base[-2:].tolist() == [1.0, 2.5]


def test_condition_block_order():
    tract = make_tract(k_income=2, k_year=2, income=((1.0, 0.0), (1.0, 0.0)), year=((4.0, 0.0), (0.0, 0.0)))
    v = condition_vector(tract, FeatureMask())
    assert np.allclose(v[:2], 0.5)
    assert np.allclose(v[2:4], softmax_normalize([4.0, 0.0], 4.0))
    assert np.allclose(v[-4:], np.log1p([tract.population, tract.households, tract.houses, tract.infra_total]))


def test_augmentation_only_touches_census_bins(rng):
    tract = make_tract()
    plain = condition_vector(tract, FeatureMask())
    noisy = condition_vector(tract, FeatureMask(), rng)
    k = len(tract.income_bins) + len(tract.year_built_bins)
    assert not np.array_equal(plain[:k], noisy[:k])
    assert np.array_equal(plain[k:], noisy[k:])


def test_mask_rules():
    with pytest.raises(ConfigError):
        FeatureMask(weather=False)
    with pytest.raises(ConfigError):
        FeatureMask.from_names("weather,colour")
    assert FeatureMask.from_names("distance").weather
    assert [len(m.names()) for m in LADDER] == [1, 2, 3, 4, 5, 6]
    assert LADDER[-1].names() == list(GROUPS)


def test_condition_scaler_round_trip(rng):
    rows = rng.normal(size=(30, 5)) * 3 + 1
    rows[:, 2] = 4.0
    sc = ConditionScaler.fit(rows)
    z = sc.apply(rows)
    assert np.allclose(z[:, [0, 1, 3, 4]].mean(0), 0, atol=1e-12)
    assert np.all(z[:, 2] == 0)
    assert ConditionScaler.from_text(sc.to_text()) == sc


def _dataset(n_tracts=3, n_hours=4, n_stations=2, mask=FeatureMask()):
    r = np.random.default_rng(0)
    tracts = [make_tract(f"T{i}", population=100 * (i + 1)) for i in range(n_tracts)]
    return Dataset(tracts, np.arange(n_hours) + 100, r.normal(size=(n_hours, 10 * n_stations)),
                   r.uniform(1, 50, size=(n_tracts, n_stations)), r.uniform(0, 1, size=(n_tracts, n_hours)), mask)


def test_dataset_rows_agree_with_assemble():
    ds = _dataset()
    t, h = ds.index(np.array([2, 0]))
    base, cond = ds.base(t, h), ds.conditions()[t]
    for k in range(len(t)):
        s = ds.sample(int(t[k]), int(h[k]))
        assert np.array_equal(s.base, base[k])
        assert np.array_equal(s.condition, cond[k])
        assert s.target == ds.targets[t[k], h[k]]


def test_write_samples_shape():
    ds = _dataset(mask=FeatureMask.from_names("weather,income"))
    text, schema = write_samples(ds)
    lines = text.splitlines()
    assert len(lines) == 1 + 3 * 4
    assert len(lines[0].split(",")) == 3 + ds.base_dim + ds.cond_dim
    assert "base_columns = 20" in schema and "cond_columns = 3" in schema


# --------------------------------------------------------------------------
# split


def _sizes(split):
    return tuple(sum(v == lab for v in split.values()) for lab in ("train", "val", "test"))


def test_split_hundred():
    assert _sizes(split_tracts([f"T{i}" for i in range(100)], 0)) == (72, 8, 20)


def test_split_ten_falls_back_to_one_val():
    # floor arithmetic gives 8/0/2; one training tract then moves to validation
    assert _sizes(split_tracts([f"T{i}" for i in range(10)], 0)) == (7, 1, 2)


def test_split_too_small():
    with pytest.raises(DataError):
        split_tracts(["a", "b"], 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(10, 400), st.integers(0, 2**31 - 1))
def test_split_partition(n, seed):
    ids = [f"T{i}" for i in range(n)]
    split = split_tracts(ids, seed)
    assert split == split_tracts(ids, seed)
    assert set(split) == set(ids)
    tr, va, te = _sizes(split)
    assert te == n * 20 // 100
    assert va == max(n * 8 // 100, 1)
    assert tr + va + te == n
