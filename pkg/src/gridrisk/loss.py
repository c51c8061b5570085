"""Training objectives: class-weighted cross entropy and the exponential loss.

Each loss exposes per-sample values, the gradient with respect to the
network's probability output, and the gradient with respect to the head's
pre-activation logits (used in training for numerical stability).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class WeightedCrossEntropy:
    """Two-class soft-label cross entropy with weight ``w`` on the outage class."""

    w: float = 500.0
    d_out = 2
    name = "xent"

    def __post_init__(self):
        if not self.w > 0:
            raise ConfigError(f"cross-entropy weight must be positive, got {self.w}")

    def value_and_grad(self, pred, gt):
        pred = np.asarray(pred, dtype=float)
        gt = np.asarray(gt, dtype=float)
        if np.any(np.abs(pred.sum(axis=-1) - 1.0) > 1e-6) or np.any(pred < 0):
            raise NumericError("cross-entropy prediction is not a probability vector")
        p0 = np.maximum(pred[..., 0], LOG_CLAMP)
        p1 = np.maximum(pred[..., 1], LOG_CLAMP)
        c0, c1 = 1.0 - gt, self.w * gt
        value = -(c0 * np.log(p0) + c1 * np.log(p1))
        grad = np.stack([-c0 / p0, -c1 / p1], axis=-1)
        return value, grad

    def logit_grad(self, pred, gt):
        # softmax + cross entropy with label weights c: dL/dz_j = (sum c) p_j - c_j
        gt = np.asarray(gt, dtype=float)
        c = np.stack([1.0 - gt, self.w * gt], axis=-1)
        return c.sum(axis=-1, keepdims=True) * pred - c

    @staticmethod
    def outage_prob(pred):
        return np.asarray(pred)[..., 1]


@dataclass(frozen=True)
class Exponential:
    """exp(beta * |gt - pred|) on a single sigmoid output."""

    beta: float = 20.0
    d_out = 1
    name = "exp"

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError(f"exponential loss beta must be positive, got {self.beta}")

    def value_and_grad(self, pred, gt):
        pred = np.asarray(pred, dtype=float)
        if pred.ndim and pred.shape[-1] == 1:
            pred = pred[..., 0]
        gt = np.asarray(gt, dtype=float)
        value = np.exp(np.abs(gt - pred) * self.beta)
        grad = self.beta * np.sign(pred - gt) * value
        return value, grad

    def logit_grad(self, pred, gt):
        p = np.asarray(pred, dtype=float)[..., 0]
        _, g = self.value_and_grad(p, gt)
        return (g * p * (1.0 - p))[..., None]

    @staticmethod
    def outage_prob(pred):
        return np.asarray(pred)[..., 0]


LossKind = WeightedCrossEntropy | Exponential


def weighted_cross_entropy(pred, gt, w: float = 500.0):
    """Per-sample value and d(value)/d(pred) for a 2-vector softmax output."""
    return WeightedCrossEntropy(w).value_and_grad(pred, gt)


def exponential_loss(pred, gt, beta: float = 20.0):
    """Per-sample value and d(value)/d(pred); the subgradient at pred == gt is 0."""
    return Exponential(beta).value_and_grad(pred, gt)


def batch_loss(kind: LossKind, pred, gt) -> float:
    """Mean loss over the batch (the 1/N of both objectives)."""
    value, _ = kind.value_and_grad(pred, gt)
    return float(np.mean(value))


def make_loss(name: str, w: float = 500.0, beta: float = 20.0) -> LossKind:
    name = name.lower()
    if name in ("xent", "cross_entropy", "wce"):
        return WeightedCrossEntropy(w)
    if name in ("exp", "exponential"):
        return Exponential(beta)
    raise ConfigError(f"unknown loss {name!r}; expected 'xent' or 'exp'")
