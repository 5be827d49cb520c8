"""Command-line entry point: ``riskoracle <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import cosense, metrics, pipeline, synth
from . import data as D
from .dtgn import BN_INFERENCE
from .errors import ConfigError, DataError, RiskOracleError
from .grid import static_affinity

log = logging.getLogger("riskoracle")

# flag name -> RunConfig field
OVERRIDES = {"interval_minutes": "interval_minutes", "gamma": "gamma", "rho": "rho",
             "lambda1": "lambda1", "lambda2": "lambda2", "lambda3": "lambda3", "layers": "layers",
             "width": "width", "epochs": "epochs", "lr": "lr", "batch_size": "batch_size", "M": "M",
             "kappa": "kappa", "split": "split", "bn_inference": "bn_inference",
             "cosense_epochs": "cosense_epochs"}


def _side(n: int, what: str) -> int:
    r = math.isqrt(n)
    if r * r != n:
        raise ConfigError(f"--{what} must be a perfect square for a square grid, got {n}")
    return r


def load_city(path) -> D.CityData:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path} does not exist")
    if path.is_dir():
        path = path / "manifest.json"
    if path.suffix == ".npz":
        return D.CityData.load(path)
    city, report = D.ingest(path)
    if report.rejected:
        log.warning("ingest rejected %d records", report.rejected)
    return city


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


def build_config(args) -> pipeline.RunConfig:
    cfg = pipeline.load_config(args.config) if getattr(args, "config", None) else pipeline.RunConfig()
    changes = {}
    for flag, name in OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            changes[name] = v
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "ablate", None):
        changes["ablate"] = tuple(args.ablate)
    if getattr(args, "data", None):
        changes["manifest"] = str(args.data)
    if getattr(args, "out", None):
        changes["out_dir"] = str(args.out)
    return cfg.replace(**changes)


# --- subcommands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    rows = _side(args.m, "m")
    q_side = _side(args.q, "q")
    if rows % q_side:
        raise ConfigError(f"{q_side}x{q_side} rectangles do not tile a {rows}x{rows} grid")
    grid = synth.desk_grid(rows, rows, q_side, q_side, args.cell_meters)
    city, events, _ = synth.synth_generate(grid, args.days, args.seed, args.scenario,
                                           args.interval_minutes, out_dir=args.out)
    _emit({"out": str(args.out), "m": grid.m, "q": grid.q, "n_intervals": city.n_intervals,
           "events": len(events)})
    return 0


def cmd_ingest(args) -> int:
    city, report = D.ingest(args.manifest)
    if args.out:
        city.save(args.out)
    _emit({"n_intervals": city.n_intervals, "m": city.grid.m, "q": city.grid.q,
           "events": report.total, "binned": report.binned, "rejected": report.rejected,
           "reasons": report.reasons, "volume_missing": float(city.volume_mask.mean()),
           "speed_missing": float(city.speed_mask.mean())})
    return 0


def cmd_enhance(args) -> int:
    city = load_city(args.data)
    cfg = pipeline.RunConfig(interval_minutes=city.interval_seconds // 60)
    splits = pipeline.target_splits(city.n_intervals, city.day_len, cfg.kappa)
    train_end = int(splits["train"][-1]) + 1
    train_risk = city.risk[:train_end]
    eps = D.risk_indicator(D.weekly_totals(train_risk, city.day_len))
    nz = train_risk[train_risk > 0]
    if nz.size == 0:
        raise DataError("no accident in the training period")
    labels = D.pkde_enhance(train_risk, eps, float(nz.min()), float(nz.max()))
    values = labels.apply(city.risk)
    if args.out:
        np.savez(args.out, values=values, pi=labels.pi, eps=labels.eps)
    _emit({"b1": labels.b1, "b2": labels.b2, "pi_min": float(labels.pi.min()),
           "pi_max": float(labels.pi.max()), "zero_fraction": float((city.risk == 0).mean())})
    return 0


def _order(city):
    return cosense.proximity_order(static_affinity(city.grid, city.static))


def cmd_cosense_train(args) -> int:
    city = load_city(args.data)
    cfg = pipeline.RunConfig(seed=args.seed, cosense_epochs=args.epochs,
                             interval_minutes=city.interval_seconds // 60)
    splits = pipeline.target_splits(city.n_intervals, city.day_len, cfg.kappa)
    models = pipeline.train_cosense(city, cfg, int(splits["train"][-1]) + 1,
                                    int(splits["eval"][-1]) + 1)
    cosense.save_models(args.out, models)
    _emit({k: {"epochs": len(m.history), "best_eval": min(h["eval"] for h in m.history)}
           for k, m in models.items()})
    return 0


def cmd_cosense_fill(args) -> int:
    city = load_city(args.data)
    models = cosense.load_models(args.models)
    filled, report = cosense.fill_missing(models, city, _order(city))
    filled.save(args.out)
    _emit({"filled": report.filled, "unfillable": report.unfillable})
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args).validate()
    city = load_city(cfg.manifest)
    result = pipeline.train(cfg, city)
    out = Path(cfg.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    pipeline.save_checkpoint(out / "checkpoint.json", result)
    _emit({"checkpoint": str(out / "checkpoint.json"), "best_epoch": result.best_epoch,
           "history": result.history})
    return 0


def _load_trained(args):
    city = load_city(args.data)
    result = pipeline.load_checkpoint(args.checkpoint, city)
    cfg = result.model.cfg
    if args.split:
        cfg = cfg.replace(split=args.split)
    return city, result, cfg


def cmd_predict(args) -> int:
    city, result, cfg = _load_trained(args)
    forecasts = pipeline.predict(result.model, result.prep, result.prep.splits[cfg.split])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_forecasts(out / "forecasts.jsonl", forecasts)
    metrics.export_heatmap(forecasts[-1], city.grid, out / "heatmap")
    _emit({"forecasts": len(forecasts), "out": str(out)})
    return 0


def cmd_evaluate(args) -> int:
    city, result, cfg = _load_trained(args)
    forecasts = pipeline.predict(result.model, result.prep, result.prep.splits[cfg.split])
    report = pipeline.evaluate(forecasts, result.prep, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics(out / "metrics.json", report)
    _emit({k: report[k] for k in ("acc_at_M", "acc_at_K", "acc1_at_M", "acc1_at_K",
                                  "mse_transformed", "mse_raw", "baseline")})
    return 0


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    cfg = cfg.replace(ablate=()).validate()
    city = load_city(cfg.manifest)
    names = tuple(args.ablate) if args.ablate else pipeline.ABLATIONS
    reports = pipeline.ablate(cfg, city, names, out_dir=cfg.out_dir or "ablation")
    _emit({k: {"acc_at_K": r["acc_at_K"], "acc_at_M": r["acc_at_M"]} for k, r in reports.items()})
    return 0


def cmd_run(args) -> int:
    cfg = build_config(args).validate()
    city = load_city(cfg.manifest)
    report, _, _ = pipeline.run(cfg, city, cfg.out_dir or "run")
    _emit({k: report[k] for k in ("acc_at_M", "acc_at_K", "mse_transformed", "mse_raw", "baseline")})
    return 0


# --- parser ----------------------------------------------------------------------

def _model_flags(p, seed_required: bool):
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--data", "--manifest", dest="data", help="dataset manifest, directory or .npz")
    p.add_argument("--seed", type=int, required=seed_required)
    p.add_argument("--out", help="output directory")
    p.add_argument("--interval-minutes", dest="interval_minutes", type=int, choices=(10, 30))
    p.add_argument("--gamma", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lambda3", type=float)
    p.add_argument("--layers", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--kappa", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--M", type=int)
    p.add_argument("--split", choices=pipeline.SPLITS)
    p.add_argument("--bn-inference", dest="bn_inference", choices=BN_INFERENCE,
                   help="batch-norm statistics at inference (default: per interval)")
    p.add_argument("--cosense-epochs", dest="cosense_epochs", type=int)
    p.add_argument("--ablate", action="append", choices=pipeline.ABLATIONS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskoracle", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic city dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--days", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--m", type=int, default=144, help="number of cells (perfect square)")
    p.add_argument("--q", type=int, default=4, help="number of rectangles (perfect square)")
    p.add_argument("--cell-meters", dest="cell_meters", type=float, default=500.0)
    p.add_argument("--interval-minutes", dest="interval_minutes", type=int, choices=(10, 30), default=30)
    p.add_argument("--scenario", default="default", choices=sorted(synth.SCENARIOS))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="read a dataset manifest and report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="write the frames as .npz")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("enhance", help="apply the zero-label transform")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("cosense-train", help="fit the speed and volume co-sensing models")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=8)
    p.set_defaults(func=cmd_cosense_train)

    p = sub.add_parser("cosense-fill", help="fill missing readings with trained co-sensing models")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--out", required=True, help=".npz output")
    p.set_defaults(func=cmd_cosense_fill)

    p = sub.add_parser("train", help="train the forecaster")
    _model_flags(p, seed_required=True)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("predict", cmd_predict, "write forecasts and a heatmap"),
                                 ("evaluate", cmd_evaluate, "write metrics.json")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", "--manifest", dest="data", required=True)
        p.add_argument("--split", choices=pipeline.SPLITS)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="full model plus single-ablation runs")
    _model_flags(p, seed_required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("run", help="train, predict and evaluate in one go")
    _model_flags(p, seed_required=True)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RiskOracleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
