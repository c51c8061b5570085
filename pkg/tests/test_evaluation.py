"""Thresholding, MAE/RMSE, recall and ablation table formatting."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridrisk.errors import ConfigError
from gridrisk.evaluation import (
    THRESHOLD, AblationCell, AblationRow, MetricPair, ablation_report_csv, ablation_table_csv, mae,
    mean_std, predictions_csv, recall, rmse, threshold,
)
from gridrisk.features import LADDER

vectors = st.lists(st.floats(0.0, 1.0), min_size=1, max_size=50)


def test_threshold_boundary():
    assert threshold([0.04]).tolist() == [0.0]
    assert threshold([0.05]).tolist() == [0.05]
    assert threshold([0.0499999, 0.5, 1.0]).tolist() == [0.0, 0.5, 1.0]
    assert THRESHOLD == 0.05


@settings(max_examples=200, deadline=None)
@given(vectors)
def test_threshold_idempotent_and_non_increasing(x):
    t = threshold(x)
    assert np.array_equal(threshold(t), t)
    assert np.all(t <= np.asarray(x))
    big = np.asarray(x) >= 0.05
    assert np.array_equal(t[big], np.asarray(x)[big])


@settings(max_examples=100, deadline=None)
@given(vectors, vectors)
def test_threshold_monotone(a, b):
    n = min(len(a), len(b))
    lo = np.minimum(a[:n], b[:n])
    hi = np.maximum(a[:n], b[:n])
    assert np.all(threshold(lo) <= threshold(hi))


def test_metric_examples():
    assert mae([0.2, 0.3], [0.2, 0.3]) == 0.0 and rmse([0.2, 0.3], [0.2, 0.3]) == 0.0
    assert mae([0, 1], [0, 0]) == 0.5
    assert math.isclose(rmse([0, 1], [0, 0]), 1 / math.sqrt(2), rel_tol=1e-15)
    gt = np.linspace(0, 1, 7)
    assert math.isclose(mae(gt, gt + 0.1), 0.1) and math.isclose(rmse(gt, gt + 0.1), 0.1)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=40))
def test_mae_not_above_rmse(pairs):
    gt, pred = zip(*pairs)
    assert mae(gt, pred) <= rmse(gt, pred) + 1e-15
    # brute-force second implementation
    n = len(gt)
    assert math.isclose(rmse(gt, pred), math.sqrt(math.fsum((g - p) ** 2 for g, p in pairs) / n),
                        rel_tol=1e-12, abs_tol=1e-15)


def test_all_zero_slice_scores_zero():
    m = MetricPair.score(np.zeros(10), np.full(10, 0.049))
    assert m == MetricPair(0.0, 0.0)


def test_metric_errors():
    with pytest.raises(ConfigError):
        mae([0, 1], [0])
    with pytest.raises(ConfigError):
        rmse([], [])


def test_recall():
    assert recall([0.0, 0.2, 0.6, 0.1], [0.9, 0.04, 0.5, 0.05]) == 2 / 3
    assert math.isnan(recall([0.0], [0.3]))


def test_mean_std_exact_for_repeats():
    assert mean_std([0.1, 0.1, 0.1]) == (0.1, 0.0)
    m, s = mean_std([1.0, 2.0, 3.0])
    assert m == 2.0 and math.isclose(s, math.sqrt(2 / 3))


def _rows():
    return [AblationRow(mask, {"exp": AblationCell(0.001 * k, 0.0001, 0.01 * k, 0.002),
                               "xent": AblationCell(0.002 * k, 0.0, 0.02 * k, 0.0)})
            for k, mask in enumerate(LADDER, start=1)]


def test_ablation_table_structure():
    lines = ablation_table_csv(_rows()).splitlines()
    assert len(lines) == 7
    head = lines[0].split(",")
    assert head[:6] == ["weather", "distance", "totals", "income", "year_built", "power_infra"]
    assert len(head) == 6 + 2 * 2
    first, last = lines[1].split(","), lines[6].split(",")
    assert first[:6] == ["x", "", "", "", "", ""]
    assert last[:6] == ["x"] * 6
    assert first[6] == "0.001(0.0001)"
    # every cell is mean(std)
    assert all(c.count("(") == 1 and c.endswith(")") for line in lines[1:] for c in line.split(",")[6:])


def test_long_report_and_predictions():
    rep = ablation_report_csv(_rows()).splitlines()
    assert len(rep) == 1 + 12
    assert rep[1].startswith("weather,exp,")
    pred = predictions_csv(["T1", "T1"], [5, 6], [0.0, 0.5], [0.01, 0.5]).splitlines()
    assert pred == ["tract_id,hour,gt,pred_raw,pred_thresholded", "T1,5,0.0,0.01,0.0", "T1,6,0.5,0.5,0.5"]
