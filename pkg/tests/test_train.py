"""Optimizers, configuration parsing and the training loop on a small world."""

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridrisk.errors import ConfigError, NumericError
from gridrisk.evaluation import rmse
from gridrisk.features import FeatureMask, split_tracts
from gridrisk.loss import Exponential, WeightedCrossEntropy
from gridrisk.nn import init_params, load_checkpoint, save_checkpoint
from gridrisk.pipeline import prepare
from gridrisk.synth import WorldSpec, generate_world
from gridrisk.train import (
    Adam, RunConfig, best_constant, clip_global_norm, evaluate, fit_scaler, init_output_bias,
    parse_config, run_repeated, train_one,
)

SMALL = WorldSpec(seed=5, n_tracts=20, n_hours=400, storm_rate=20.0)


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    d = tmp_path_factory.mktemp("world")
    generate_world(SMALL).write(str(d))
    prep = prepare(str(d))
    ds = prep.dataset()
    return ds, split_tracts(ds.tract_ids, 0)


def _cfg(**kw):
    base = dict(epochs=2, batch_size=256, hidden=(16, 8), base_hidden=(16, 8), cond_hidden=(8,),
                head_hidden=(8,), n_runs=1)
    base.update(kw)
    return RunConfig(**base)


# --------------------------------------------------------------------------
# configuration


def test_parse_config_with_overrides():
    cfg = parse_config("# run\narch = cond\nloss = xent\nw = 1\ndistance = false\nepochs = 3\n")
    assert cfg.arch == "conditional" and cfg.loss == "xent" and cfg.w == 1.0 and cfg.epochs == 3
    assert not cfg.mask.distance and cfg.mask.income
    assert parse_config(cfg.to_text()) == cfg
    assert parse_config("mask = weather,income").mask == FeatureMask.from_names("weather,income")


@pytest.mark.parametrize("text", ["arch = rnn", "loss = hinge", "epochs = x", "colour = red",
                                  "distance = maybe", "no equals sign", "weather = false"])
def test_bad_config(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_defaults_match_stated_constants():
    cfg = RunConfig()
    assert (cfg.w, cfg.beta, cfg.batch_size, cfg.learning_rate, cfg.clip_norm, cfg.n_runs) == \
        (500.0, 20.0, 512, 1e-3, 10.0, 3)
    assert cfg.architecture(40, 34).d_out == 1
    assert replace(cfg, loss="xent").architecture(40, 34).d_out == 2


# --------------------------------------------------------------------------
# optimizer pieces


def test_adam_first_step_is_lr_sized():
    p = {"x": np.array([1.0, -2.0])}
    Adam(p, lr=0.1).step(p, {"x": np.array([3.0, -0.5])})
    assert np.allclose(p["x"], [0.9, -1.9], atol=1e-7)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 50))
def test_clip_global_norm(seed, max_norm):
    r = np.random.default_rng(seed)
    g = {"a": r.normal(size=(3, 4)) * 10, "b": r.normal(size=5)}
    before = math.sqrt(sum(float((v ** 2).sum()) for v in g.values()))
    ref = {k: v.copy() for k, v in g.items()}
    norm = clip_global_norm(g, max_norm)
    after = math.sqrt(sum(float((v ** 2).sum()) for v in g.values()))
    assert math.isclose(norm, before, rel_tol=1e-12)
    assert after <= max_norm * (1 + 1e-12)
    if before <= max_norm:
        assert all(np.array_equal(g[k], ref[k]) for k in g)


def test_best_constant():
    t = np.array([0.0, 0.0, 0.0, 1.0])
    # weighted cross entropy: w*sum(g) / (w*sum(g) + sum(1-g))
    assert math.isclose(best_constant(WeightedCrossEntropy(3.0), t), 3 / 6)
    c = best_constant(Exponential(2.0), t)
    grid = np.linspace(0, 1, 10001)
    brute = grid[np.argmin([np.mean(np.exp(2 * np.abs(t - x))) for x in grid])]
    assert abs(c - brute) < 2e-4
    assert best_constant(WeightedCrossEntropy(), np.zeros(5)) == 1e-4


def test_output_bias_init():
    arch = _cfg(loss="xent").architecture(4, 2)
    params = init_params(arch, 0)
    init_output_bias(params, WeightedCrossEntropy(1.0), np.array([0.2, 0.2]))
    assert math.isclose(1 / (1 + math.exp(-params["out.b"][1])), 0.2)
    assert params["out.b"][0] == 0.0


# --------------------------------------------------------------------------
# training loop


def test_zero_epochs_returns_initialization(small):
    ds, split = small
    cfg = _cfg(epochs=0)
    params, report = train_one(cfg, ds, split)
    expected = init_params(cfg.architecture(ds.base_dim, ds.cond_dim), cfg.seed)
    train_rows = [i for i, t in enumerate(ds.tract_ids) if split[t] == "train"]
    init_output_bias(expected, cfg.loss_kind, ds.targets[train_rows])
    assert all(np.array_equal(params[k], expected[k]) for k in params)
    assert report.selected_epoch == 0 and report.train_loss == []


def test_training_is_deterministic(small):
    ds, split = small
    a = train_one(_cfg(arch="cond"), ds, split)
    b = train_one(_cfg(arch="cond"), ds, split)
    assert a[1].train_loss == b[1].train_loss and a[1].val_mae == b[1].val_mae
    assert a[1].test == b[1].test
    assert all(np.array_equal(a[0][k], b[0][k]) for k in a[0])


def test_training_beats_all_zeros(small):
    ds, split = small
    _, report = train_one(_cfg(epochs=6, hidden=(32, 16)), ds, split)
    test_rows = [i for i, t in enumerate(ds.tract_ids) if split[t] == "test"]
    zeros = rmse(ds.targets[test_rows], np.zeros_like(ds.targets[test_rows]))
    assert report.test.rmse < zeros
    decreasing = sum(b <= a for a, b in zip(report.train_loss, report.train_loss[1:]))
    assert decreasing >= 0.8 * (len(report.train_loss) - 1) - 1


def test_selection_keeps_best_validation_epoch(small):
    ds, split = small
    _, report = train_one(_cfg(epochs=4), ds, split)
    assert report.val_mae[report.selected_epoch] == min(report.val_mae)
    assert len(report.val_mae) == 5


def test_mask_mismatch_rejected(small):
    ds, split = small
    with pytest.raises(ConfigError):
        train_one(_cfg(mask=FeatureMask.from_names("weather")), ds, split)


def test_divergence_raises_numeric_error(small):
    ds, split = small
    with pytest.raises(NumericError, match="epoch 1"):
        train_one(_cfg(optimizer="sgd", learning_rate=1e300, clip_norm=1e308, momentum=0.0), ds, split)


def test_test_targets_are_not_read_before_reporting(small):
    ds, split = small
    poisoned = replace(ds.with_mask(ds.mask))
    poisoned.targets = ds.targets.copy()
    test_rows = [i for i, t in enumerate(ds.tract_ids) if split[t] == "test"]
    poisoned.targets[test_rows] = 1.0
    a, _ = train_one(_cfg(), ds, split)
    b, _ = train_one(_cfg(), poisoned, split)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_checkpoint_reproduces_metrics(small, tmp_path):
    ds, split = small
    cfg = _cfg(arch="cond", loss="xent")
    params, report = train_one(cfg, ds, split)
    arch = cfg.architecture(ds.base_dim, ds.cond_dim)
    save_checkpoint(tmp_path / "m.bin", arch, params)
    arch2, params2, _ = load_checkpoint(tmp_path / "m.bin")
    rows = [i for i, t in enumerate(ds.tract_ids) if split[t] == "test"]
    _, _, gt, raw = evaluate(params2, arch2, cfg.loss_kind, ds, rows, fit_scaler(ds, split))
    from gridrisk.evaluation import MetricPair
    assert MetricPair.score(gt, raw) == report.test


def test_repeated_runs(small):
    ds, split = small
    one = run_repeated(_cfg(n_runs=1), ds)
    assert one.mae_std == 0.0 and one.rmse_std == 0.0
    same = run_repeated(_cfg(), ds, seeds=[4, 4, 4])
    assert same.rmse_std == 0.0
    three = run_repeated(_cfg(n_runs=3), ds)
    vals = [r.rmse for r in three.runs]
    assert math.isclose(three.rmse_mean, sum(vals) / 3, rel_tol=1e-12)
    assert math.isclose(three.rmse_std, math.sqrt(sum((v - sum(vals) / 3) ** 2 for v in vals) / 3),
                        rel_tol=1e-9, abs_tol=1e-15)
