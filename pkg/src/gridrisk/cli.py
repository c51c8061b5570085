"""``gridrisk`` command line: synth, ingest, train, eval, ablate, predict.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import warnings

import numpy as np

from .errors import ConfigError, DataError, FormatError, NumericError
from .evaluation import (
    AblationCell, ablate, ablation_report_csv, ablation_table_csv, mae, predictions_csv, report_csv, rmse,
    threshold,
)
from .features import (
    DISTANCE_SCALE_KM, ConditionScaler, FeatureMask, condition_vector, format_targets, split_tracts, write_samples,
)
from .ingest import (
    ChannelStats, StationLocation, WeatherSchema, fill_missing, parse_tracts, parse_weather, write_weather,
)
from .nn import forward, load_checkpoint, save_checkpoint
from .pipeline import distance_matrix, prepare, weather_matrix
from .synth import WorldSpec, generate_world
from .loss import make_loss
from .train import RunConfig, config_from_mapping, evaluate, fit_scaler, parse_kv, train_one


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read(path: str) -> str:
    with open(path, encoding="utf-8", newline="") as fh:
        return fh.read()


def _ensure_parent(path: str):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def _write(path: str, text: str):
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _echo(title: str, text: str):
    print(f"# {title}")
    print(text.rstrip("\n"))


def _run_config(args) -> RunConfig:
    values = parse_kv(_read(args.config)) if getattr(args, "config", None) else {}
    overrides = {"seed": args.seed, "epochs": args.epochs, "loss": args.loss, "arch": args.arch, "mask": args.mask}
    values.update({k: str(v) for k, v in overrides.items() if v is not None})
    return config_from_mapping(values)


def _add_overrides(p):
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--loss", choices=("xent", "exp"))
    p.add_argument("--arch", choices=("uncond", "cond"))
    p.add_argument("--mask", help="comma list of feature groups")


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    values = parse_kv(_read(args.spec)) if args.spec else {}
    if args.seed is not None:
        values["seed"] = str(args.seed)
    spec = WorldSpec.from_mapping(values)
    _echo("world spec", spec.to_text())
    world = generate_world(spec)
    world.write(args.out)
    print(f"wrote {len(world.files) + 1} files to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    prep = prepare(args.data)
    mask = FeatureMask.from_names(args.mask) if args.mask else FeatureMask()
    _echo("ingest", f"data = {args.data}\nmask = {mask.describe()}\nstations = {len(prep.stations)}\n"
                    f"tracts = {len(prep.tracts)}\nhours = {len(prep.grid.hours)}\nevents = {len(prep.events)}")
    _write(os.path.join(args.out, "weather_clean.csv"), write_weather(prep.grid.to_observations()))
    _write(os.path.join(args.out, "stats.csv"), prep.stats.to_csv())
    _write(os.path.join(args.out, "targets.csv"), format_targets(prep.targets, prep.tracts, int(prep.grid.hours[0])))
    if args.samples:
        samples, schema = write_samples(prep.dataset(mask))
        _write(os.path.join(args.out, "samples.csv"), samples)
        _write(os.path.join(args.out, "schema.txt"), schema)
    return 0


def _stations_meta(stations) -> str:
    return ";".join(f"{s.station_id}:{s.lat!r}:{s.lon!r}" for s in stations)


def _stations_from_meta(text: str) -> list[StationLocation]:
    out = []
    for part in text.split(";"):
        sid, lat, lon = part.rsplit(":", 2)
        out.append(StationLocation(sid, float(lat), float(lon)))
    return out


def cmd_train(args) -> int:
    cfg = _run_config(args)
    _echo("run config", cfg.to_text())
    prep = prepare(args.data)
    ds = prep.dataset(cfg.mask)
    split = split_tracts(ds.tract_ids, cfg.split_seed)
    params, report = train_one(cfg, ds, split)
    scaler = fit_scaler(ds, split)
    checkpoint = args.checkpoint or os.path.join(args.data, "model.bin")
    meta = {
        "loss": cfg.loss, "w": repr(cfg.w), "beta": repr(cfg.beta), "mask": ",".join(cfg.mask.names()),
        "seed": str(cfg.seed), "split_seed": str(cfg.split_seed),
        "stations": _stations_meta(prep.stations), "cond_scaler": scaler.to_text(),
        "selected_epoch": str(report.selected_epoch),
    }
    _ensure_parent(checkpoint)
    save_checkpoint(checkpoint, cfg.architecture(ds.base_dim, ds.cond_dim), params, meta)
    _write(checkpoint + ".stats.csv", prep.stats.to_csv())
    lines = ["epoch,train_loss,val_loss,val_mae"]
    lines.append(f"0,,,{report.val_mae[0]!r}")
    for e, (tl, vl, vm) in enumerate(zip(report.train_loss, report.val_loss, report.val_mae[1:]), start=1):
        lines.append(f"{e},{tl!r},{vl!r},{vm!r}")
    _write(checkpoint + ".history.csv", "\n".join(lines) + "\n")
    print(f"selected epoch {report.selected_epoch}; test mae {report.test.mae:.6g} rmse {report.test.rmse:.6g}")
    print(f"checkpoint written to {checkpoint}")
    return 0


def _load_model(path):
    arch, params, meta = load_checkpoint(path)
    stats = ChannelStats.from_csv(_read(path + ".stats.csv"))
    loss = make_loss(meta["loss"], float(meta["w"]), float(meta["beta"]))
    mask = FeatureMask.from_names(meta["mask"])
    scaler = ConditionScaler.from_text(meta.get("cond_scaler", ""))
    return arch, params, meta, stats, loss, mask, scaler


def cmd_eval(args) -> int:
    arch, params, meta, stats, loss, mask, scaler = _load_model(args.checkpoint)
    _echo("eval", f"checkpoint = {args.checkpoint}\narch = {arch.kind}\nloss = {loss.name}\n"
                  f"mask = {mask.describe()}\nseed = {meta.get('seed')}\nsplit_seed = {meta['split_seed']}")
    prep = prepare(args.data)
    ds = prep.dataset(mask, stats)
    if ds.base_dim != arch.n_base or ds.cond_dim != arch.n_cond:
        raise DataError("data directory does not match the checkpoint's feature layout")
    split = split_tracts(ds.tract_ids, int(meta["split_seed"]))
    rows = [i for i, t in enumerate(ds.tract_ids) if split[t] == "test"]
    t, h, gt, raw = evaluate(params, arch, loss, ds, rows, scaler)
    thr = threshold(raw)
    cell = AblationCell(mae(gt, thr), 0.0, rmse(gt, thr), 0.0)
    _write(os.path.join(args.out, "report.csv"), report_csv([(mask.describe(), loss.name, cell)]))
    _write(os.path.join(args.out, "predictions.csv"),
           predictions_csv([ds.tract_ids[i] for i in t], ds.hours[h], gt, raw))
    print(f"test mae {cell.mae_mean:.6g} rmse {cell.rmse_mean:.6g} over {len(gt)} samples")
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    _echo("run config", cfg.to_text())
    prep = prepare(args.data)
    rows = ablate(cfg, prep.dataset())
    _write(os.path.join(args.out, "ablation.csv"), ablation_table_csv(rows))
    _write(os.path.join(args.out, "report.csv"), ablation_report_csv(rows))
    print(ablation_table_csv(rows), end="")
    return 0


def cmd_predict(args) -> int:
    arch, params, meta, stats, loss, mask, scaler = _load_model(args.checkpoint)
    stations = _stations_from_meta(meta["stations"])
    _echo("predict", f"checkpoint = {args.checkpoint}\narch = {arch.kind}\nloss = {loss.name}\n"
                     f"mask = {mask.describe()}\nseed = {meta.get('seed')}")
    schema = WeatherSchema()
    grid = fill_missing(parse_weather(_read(args.weather), schema), schema, [s.station_id for s in stations])
    weather = weather_matrix(grid, stats)
    tracts = parse_tracts(_read(args.tracts))
    dist = distance_matrix(tracts, stations)
    cond = scaler.apply(np.stack([condition_vector(t, mask) for t in tracts]))
    if cond.shape[1] != arch.n_cond:
        raise DataError("tract file does not match the checkpoint's condition layout")
    lines = ["tract_id,hour,pred_raw,pred_thresholded"]
    n_h = len(grid.hours)
    for i, tract in enumerate(tracts):
        base = [weather]
        if mask.distance:
            base.append(np.repeat(dist[i][None, :] / DISTANCE_SCALE_KM, n_h, axis=0))
        raw = loss.outage_prob(forward(params, arch, np.concatenate(base, axis=1), np.repeat(cond[i:i + 1], n_h, 0)))
        for hour, p, q in zip(grid.hours, raw, threshold(raw)):
            lines.append(f"{tract.tract_id},{int(hour)},{float(p)!r},{float(q)!r}")
    _write(args.out, "\n".join(lines) + "\n")
    print(f"wrote {len(tracts) * n_h} predictions to {args.out}")
    return 0


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {message}", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gridrisk", description="Hourly outage probability per census tract.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic study area")
    p.add_argument("--spec", help="world settings file (key = value)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="clean inputs and write derived tables")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask")
    p.add_argument("--samples", action="store_true", help="also write samples.csv and schema.txt")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    _add_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the test tracts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="feature-group ablation on the unconditional model")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_overrides(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="outage probabilities from a weather forecast")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--weather", required=True)
    p.add_argument("--tracts", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:          # --help
        return 0 if exc.code in (0, None) else 1
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            warnings.showwarning = _show_warning
            return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, FormatError, ConfigError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
