"""Thresholded error metrics and the feature-group ablation ladder."""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .features import GROUPS, LADDER, Dataset, FeatureMask

THRESHOLD = 0.05


def threshold(preds, cutoff: float = THRESHOLD) -> np.ndarray:
    """Zero every prediction strictly below ``cutoff``; others pass through."""
    preds = np.asarray(preds, dtype=float)
    return np.where(preds < cutoff, 0.0, preds)


def _pair(gt, pred):
    gt = np.asarray(gt, dtype=float).ravel()
    pred = np.asarray(pred, dtype=float).ravel()
    if gt.shape != pred.shape:
        raise ConfigError(f"length mismatch: {gt.size} targets vs {pred.size} predictions")
    if gt.size == 0:
        raise ConfigError("cannot score an empty set")
    return gt, pred


def mae(gt, pred) -> float:
    gt, pred = _pair(gt, pred)
    return float(np.mean(np.abs(gt - pred)))


def rmse(gt, pred) -> float:
    gt, pred = _pair(gt, pred)
    return float(np.sqrt(np.mean((gt - pred) ** 2)))


@dataclass(frozen=True)
class MetricPair:
    mae: float
    rmse: float

    @classmethod
    def score(cls, gt, raw_pred) -> "MetricPair":
        """Threshold the raw predictions, then compute both metrics."""
        pred = threshold(raw_pred)
        return cls(mae(gt, pred), rmse(gt, pred))


def recall(gt, raw_pred, cutoff: float = THRESHOLD) -> float:
    """Share of outage samples (gt >= cutoff) that are predicted at or above cutoff."""
    gt = np.asarray(gt, dtype=float)
    hit = np.asarray(raw_pred, dtype=float) >= cutoff
    pos = gt >= cutoff
    return float(hit[pos].mean()) if pos.any() else float("nan")


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and population standard deviation (exact for repeated values)."""
    values = [float(v) for v in values]
    return float(statistics.mean(values)), float(statistics.pstdev(values))


# --------------------------------------------------------------------------
# ablation


@dataclass(frozen=True)
class AblationCell:
    mae_mean: float
    mae_std: float
    rmse_mean: float
    rmse_std: float


@dataclass(frozen=True)
class AblationRow:
    mask: FeatureMask
    cells: dict[str, AblationCell]        # keyed by loss name ("exp", "xent")


def ablate(base_config, dataset: Dataset, losses: Sequence[str] = ("exp", "xent"),
           ladder: Sequence[FeatureMask] = LADDER) -> list[AblationRow]:
    """Train the unconditional model on each nested feature set under each loss."""
    from .train import run_repeated

    rows = []
    prev: set[str] = set()
    for mask in ladder:
        names = set(mask.names())
        if prev and not (prev < names and len(names - prev) == 1):
            raise ConfigError("ablation masks must add exactly one group per row")
        prev = names
        cells = {}
        for loss in losses:
            cfg = replace(base_config, arch="unconditional", loss=loss, mask=mask)
            result = run_repeated(cfg, dataset.with_mask(mask))
            cells[loss] = AblationCell(result.mae_mean, result.mae_std, result.rmse_mean, result.rmse_std)
        rows.append(AblationRow(mask, cells))
    return rows


def _cell(mean: float, std: float) -> str:
    return f"{mean:.4g}({std:.2g})"


def ablation_table_csv(rows: Sequence[AblationRow], losses: Sequence[str] = ("exp", "xent")) -> str:
    """One line per ladder row: six group check columns then mean(std) cells per loss."""
    labels = {"exp": "exponential", "xent": "cross_entropy"}
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow([*GROUPS, *(f"{labels.get(l, l)}_{m}" for l in losses for m in ("mae", "rmse"))])
    for row in rows:
        flags = ["x" if getattr(row.mask, g) else "" for g in GROUPS]
        cells = []
        for loss in losses:
            c = row.cells[loss]
            cells += [_cell(c.mae_mean, c.mae_std), _cell(c.rmse_mean, c.rmse_std)]
        w.writerow([*flags, *cells])
    return out.getvalue()


def report_csv(entries: Sequence[tuple[str, str, AblationCell]]) -> str:
    """Long-form ``report.csv``: (mask description, loss, cell) per line."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["mask", "loss", "mae_mean", "mae_std", "rmse_mean", "rmse_std"])
    for mask, loss, c in entries:
        w.writerow([mask, loss, repr(c.mae_mean), repr(c.mae_std), repr(c.rmse_mean), repr(c.rmse_std)])
    return out.getvalue()


def ablation_report_csv(rows: Sequence[AblationRow]) -> str:
    return report_csv([(r.mask.describe(), loss, c) for r in rows for loss, c in r.cells.items()])


def predictions_csv(tract_ids: Sequence[str], hours: Sequence[int], gt, raw) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["tract_id", "hour", "gt", "pred_raw", "pred_thresholded"])
    thr = threshold(raw)
    for t, h, g, p, q in zip(tract_ids, hours, np.asarray(gt, float), np.asarray(raw, float), thr):
        w.writerow([t, int(h), repr(float(g)), repr(float(p)), repr(float(q))])
    return out.getvalue()
