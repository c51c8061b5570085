"""Mini-batch training with validation-based model selection."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ConfigError, NumericError
from .evaluation import MetricPair, mean_std
from .features import GROUPS, ConditionScaler, Dataset, FeatureMask, split_tracts
from .loss import LossKind, WeightedCrossEntropy, make_loss
from .nn import Architecture, ForwardCache, Params, backward, forward, init_params

log = logging.getLogger(__name__)

_ARCH_ALIASES = {"uncond": "unconditional", "unconditional": "unconditional",
                 "cond": "conditional", "conditional": "conditional"}


@dataclass(frozen=True)
class RunConfig:
    arch: str = "unconditional"
    loss: str = "exp"
    w: float = 500.0
    beta: float = 20.0
    mask: FeatureMask = field(default_factory=FeatureMask)
    seed: int = 0
    split_seed: int = 0
    epochs: int = 50
    batch_size: int = 512
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    clip_norm: float = 10.0
    n_runs: int = 3
    hidden: tuple[int, ...] = (256, 128, 64, 32)
    base_hidden: tuple[int, ...] = (128, 64)
    cond_hidden: tuple[int, ...] = (64, 32)
    head_hidden: tuple[int, ...] = (32,)

    def __post_init__(self):
        arch = _ARCH_ALIASES.get(self.arch)
        if arch is None:
            raise ConfigError(f"unknown architecture {self.arch!r}")
        object.__setattr__(self, "arch", arch)
        make_loss(self.loss, self.w, self.beta)
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.n_runs < 1 or not self.learning_rate > 0:
            raise ConfigError("epochs >= 0, batch_size >= 1, n_runs >= 1 and learning_rate > 0 required")

    @property
    def loss_kind(self) -> LossKind:
        return make_loss(self.loss, self.w, self.beta)

    def architecture(self, n_base: int, n_cond: int) -> Architecture:
        return Architecture(self.arch, n_base, n_cond, self.loss_kind.d_out, self.hidden,
                            self.base_hidden, self.cond_hidden, self.head_hidden)

    def to_text(self) -> str:
        """Flat ``key = value`` rendering, readable by :func:`parse_config`."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "mask":
                value = ",".join(value.names())
            elif isinstance(value, tuple):
                value = ",".join(map(str, value))
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


def config_from_mapping(values: Mapping[str, str], base: RunConfig | None = None) -> RunConfig:
    """Apply string settings on top of ``base``.

    Besides the field names, each feature group accepts a boolean key
    (``distance = false``) and ``mask`` takes a comma list of groups.
    """
    cfg = base or RunConfig()
    known = {f.name: f for f in fields(RunConfig)}
    updates: dict = {}
    mask_flags = {g: getattr(cfg.mask, g) for g in GROUPS}
    for key, value in values.items():
        if key == "mask":
            m = FeatureMask.from_names(value)
            mask_flags = {g: getattr(m, g) for g in GROUPS}
        elif key in GROUPS:
            mask_flags[key] = _bool(value)
        elif key in known:
            current = getattr(cfg, key)
            try:
                if isinstance(current, bool):
                    updates[key] = _bool(value)
                elif isinstance(current, int):
                    updates[key] = int(value)
                elif isinstance(current, float):
                    updates[key] = float(value)
                elif isinstance(current, tuple):
                    updates[key] = tuple(int(v) for v in value.split(",") if v.strip())
                else:
                    updates[key] = value
            except ValueError:
                raise ConfigError(f"bad value for {key!r}: {value!r}") from None
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    updates["mask"] = FeatureMask(**mask_flags)
    return replace(cfg, **updates)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    return config_from_mapping(parse_kv(text), base)


# --------------------------------------------------------------------------
# optimizers


class Adam:
    def __init__(self, params: Params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Params, grads: Params):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class SGD:
    def __init__(self, params: Params, lr=1e-3, momentum=0.9):
        self.lr, self.momentum = lr, momentum
        self.vel = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Params, grads: Params):
        for k, g in grads.items():
            self.vel[k] = self.momentum * self.vel[k] - self.lr * g
            params[k] += self.vel[k]


def clip_global_norm(grads: Params, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] *= scale
    return norm


# --------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    train_loss: list[float]
    val_loss: list[float]
    val_mae: list[float]          # index 0 is the initialization
    selected_epoch: int
    test: MetricPair
    wall_time: float = 0.0

    @property
    def test_mae(self) -> float:
        return self.test.mae

    @property
    def test_rmse(self) -> float:
        return self.test.rmse


def _rows(split: Mapping[str, str], dataset: Dataset, label: str) -> np.ndarray:
    return np.array([i for i, t in enumerate(dataset.tract_ids) if split[t] == label], dtype=int)


def best_constant(loss: LossKind, targets: np.ndarray) -> float:
    """Outage probability of the constant predictor minimizing ``loss`` on ``targets``."""
    targets = np.asarray(targets, dtype=float).ravel()
    if isinstance(loss, WeightedCrossEntropy):
        c1 = loss.w * targets.sum()
        c = c1 / (c1 + (1.0 - targets).sum())
    else:
        res = minimize_scalar(lambda c: float(np.mean(np.exp(loss.beta * np.abs(targets - c)))),
                              bounds=(0.0, 1.0), method="bounded", options={"xatol": 1e-8})
        c = float(res.x)
    return float(np.clip(c, 1e-4, 1.0 - 1e-4))


def init_output_bias(params: Params, loss: LossKind, targets: np.ndarray):
    """Start the head at the best constant prediction (avoids a saturating first epoch)."""
    c = best_constant(loss, targets)
    logit = np.log(c) - np.log1p(-c)
    params["out.b"] = np.array([logit]) if loss.d_out == 1 else np.array([0.0, logit])


def fit_scaler(dataset: Dataset, split: Mapping[str, str]) -> ConditionScaler:
    """Condition standardization from the raw (unaugmented) training tracts."""
    return ConditionScaler.fit(dataset.conditions()[_rows(split, dataset, "train")])


def predict(params: Params, arch: Architecture, loss: LossKind, dataset: Dataset,
            t_idx: np.ndarray, h_idx: np.ndarray, cond: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Raw outage probabilities for the given (tract, hour) index pairs."""
    out = np.empty(len(t_idx))
    for lo in range(0, len(t_idx), chunk):
        t, h = t_idx[lo:lo + chunk], h_idx[lo:lo + chunk]
        out[lo:lo + chunk] = loss.outage_prob(forward(params, arch, dataset.base(t, h), cond[t]))
    return out


def _mean_loss(params, arch, loss, dataset, t_idx, h_idx, cond, chunk=8192) -> float:
    total = 0.0
    for lo in range(0, len(t_idx), chunk):
        t, h = t_idx[lo:lo + chunk], h_idx[lo:lo + chunk]
        pred = forward(params, arch, dataset.base(t, h), cond[t])
        value, _ = loss.value_and_grad(pred, dataset.targets[t, h])
        total += float(np.sum(value))
    return total / max(len(t_idx), 1)


def train_one(config: RunConfig, dataset: Dataset, split: Mapping[str, str]) -> tuple[Params, TrainReport]:
    """Train one model; returns the parameters with the best validation MAE.

    Initialization, batch order and condition augmentation all derive from
    ``config.seed``. Test targets are read only for the final report.
    """
    if dataset.mask != config.mask:
        raise ConfigError(f"dataset built for mask {dataset.mask.describe()}, config wants {config.mask.describe()}")
    start = time.perf_counter()
    loss = config.loss_kind
    arch = config.architecture(dataset.base_dim, dataset.cond_dim)
    params = init_params(arch, config.seed)

    train_rows, val_rows, test_rows = (_rows(split, dataset, s) for s in ("train", "val", "test"))
    if len(train_rows) == 0:
        raise ConfigError("empty training split")
    in_train = np.zeros(len(dataset.tracts), dtype=bool)
    in_train[train_rows] = True
    scaler = fit_scaler(dataset, split)
    raw_cond = scaler.apply(dataset.conditions())
    tr_t, tr_h = dataset.index(train_rows)
    init_output_bias(params, loss, dataset.targets[train_rows])
    va_t, va_h = dataset.index(val_rows)
    te_t, te_h = dataset.index(test_rows)

    opt = Adam(params, config.learning_rate) if config.optimizer == "adam" else \
        SGD(params, config.learning_rate, config.momentum)
    order_rng = np.random.default_rng([config.seed, 1])

    def val_mae(p):
        if len(va_t) == 0:
            return 0.0
        raw = predict(p, arch, loss, dataset, va_t, va_h, raw_cond)
        return MetricPair.score(dataset.targets[va_t, va_h], raw).mae

    best = {k: v.copy() for k, v in params.items()}
    history_train, history_val, history_mae = [], [], [val_mae(params)]
    best_mae, best_epoch = history_mae[0], 0

    for epoch in range(1, config.epochs + 1):
        cond = scaler.apply(dataset.conditions(
            lambda i: np.random.default_rng([config.seed, epoch, i]) if in_train[i] else None))
        perm = order_rng.permutation(len(tr_t))
        total = 0.0
        for b, lo in enumerate(range(0, len(perm), config.batch_size)):
            sel = perm[lo:lo + config.batch_size]
            t, h = tr_t[sel], tr_h[sel]
            gt = dataset.targets[t, h]
            cache = ForwardCache(arch)
            try:
                pred = forward(params, arch, dataset.base(t, h), cond[t], cache)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from None
            value, _ = loss.value_and_grad(pred, gt)
            batch_loss = float(np.mean(value))
            if not np.isfinite(batch_loss):
                raise NumericError(f"epoch {epoch}, batch {b}: non-finite loss at layer 'out'")
            total += batch_loss * len(sel)
            grads = backward(params, cache, loss.logit_grad(pred, gt) / len(sel), wrt="logits")
            clip_global_norm(grads, config.clip_norm)
            opt.step(params, grads)
        history_train.append(total / len(perm))
        history_val.append(_mean_loss(params, arch, loss, dataset, va_t, va_h, raw_cond) if len(va_t) else 0.0)
        history_mae.append(val_mae(params))
        if history_mae[-1] < best_mae:
            best_mae, best_epoch = history_mae[-1], epoch
            best = {k: v.copy() for k, v in params.items()}
        log.debug("epoch %d train %.5g val %.5g val_mae %.5g", epoch, history_train[-1],
                  history_val[-1], history_mae[-1])

    if len(te_t):
        raw = predict(best, arch, loss, dataset, te_t, te_h, raw_cond)
        test = MetricPair.score(dataset.targets[te_t, te_h], raw)
    else:
        test = MetricPair(float("nan"), float("nan"))
    report = TrainReport(history_train, history_val, history_mae, best_epoch, test,
                         time.perf_counter() - start)
    return best, report


@dataclass
class RepeatedResult:
    runs: list[MetricPair]
    reports: list[TrainReport]

    @property
    def mae_mean(self) -> float:
        return mean_std([r.mae for r in self.runs])[0]

    @property
    def mae_std(self) -> float:
        return mean_std([r.mae for r in self.runs])[1]

    @property
    def rmse_mean(self) -> float:
        return mean_std([r.rmse for r in self.runs])[0]

    @property
    def rmse_std(self) -> float:
        return mean_std([r.rmse for r in self.runs])[1]


def run_repeated(config: RunConfig, dataset: Dataset, seeds: Sequence[int] | None = None) -> RepeatedResult:
    """Train ``n_runs`` models with seeds ``seed + k`` on one fixed tract split."""
    split = split_tracts(dataset.tract_ids, config.split_seed)
    if seeds is None:
        seeds = [config.seed + k for k in range(config.n_runs)]
    runs, reports = [], []
    for s in seeds:
        _, report = train_one(replace(config, seed=s), dataset, split)
        runs.append(report.test)
        reports.append(report)
    return RepeatedResult(runs, reports)


def evaluate(params: Params, arch: Architecture, loss: LossKind, dataset: Dataset,
             rows: Sequence[int], scaler: ConditionScaler) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(tract rows, hour columns, ground truth, raw predictions) for the given tracts, no augmentation."""
    t, h = dataset.index(np.asarray(rows, dtype=int))
    raw = predict(params, arch, loss, dataset, t, h, scaler.apply(dataset.conditions()))
    return t, h, dataset.targets[t, h], raw

