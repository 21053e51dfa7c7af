"""Command-line entry point: ``simreweight <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 divergence.
Every subcommand leaves existing outputs untouched unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import evaluation as ev
from . import gradcheck as gc
from . import pipeline as pl
from .config import RunConfig, load_config, parse_override
from .dataset import atomic_write_text
from .errors import ConfigError, Diverged, IoError, ShapeMismatch, SimReweightError, ZeroTotalLoss
from .model import MSTNet, ModelConfig
from .params import load_checkpoint, save_checkpoint
from .reweighter import HISTORY_COLUMNS, WEIGHT_COLUMNS
from .simulator import TASKS
from .trainer import HISTORY_COLUMNS as TRAIN_COLUMNS
from .trainer import TrainConfig, train

log = logging.getLogger("simreweight")

EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 2, 3, 4
LOG_ENV = "SIMREWEIGHT_LOG"
CHECKPOINT = "model"
RUN_CONFIG = "run.yaml"
TIMING_SUFFIX = ".timing.json"


# ---------------------------------------------------------------- helpers


def configure_logging() -> None:
    level_name = os.environ.get(LOG_ENV, "WARNING").upper()
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        raise ConfigError(f"{LOG_ENV}={level_name!r} is not a logging level")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def csv_text(rows: list, columns: list) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def read_weights(path: Path, sample_ids: list) -> np.ndarray:
    if not path.is_file():
        raise IoError(f"sample weights file {path} not found")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"sample_id", "raw_w"} <= set(reader.fieldnames):
            raise IoError(f"{path}: expected columns {WEIGHT_COLUMNS}")
        by_id = {int(r["sample_id"]): float(r["raw_w"]) for r in reader}
    missing = [i for i in sample_ids if i not in by_id]
    if missing or len(by_id) != len(sample_ids):
        raise ConfigError(f"{path}: weights do not match the {len(sample_ids)} simulated samples")
    return np.array([by_id[i] for i in sample_ids])


def _done(marker: Path, force: bool) -> bool:
    if marker.exists() and not force:
        print(f"{marker} exists; skipping (use --force to overwrite)")
        return True
    return False


def _load_bundle(path: str) -> ds.DatasetBundle:
    return ds.load(Path(path))


def _check_geometry(cfg: RunConfig, bundle: ds.DatasetBundle) -> None:
    for key in ("L_in", "L_token", "L_out", "patch_rows", "patch_cols"):
        if getattr(bundle.config, key) != getattr(cfg.model, key):
            raise ConfigError(f"model.{key}={getattr(cfg.model, key)} but the bundle was "
                              f"built with {key}={getattr(bundle.config, key)}")


def _overrides(args) -> dict:
    return dict(parse_override(text) for text in (args.set or []))


def _task_index(name: str) -> int:
    if name not in TASKS:
        raise ConfigError(f"unknown task {name!r}; expected one of {TASKS}")
    return TASKS.index(name)


def _write_run(out: Path, cfg: RunConfig, variant: str, params, extra_meta: dict,
               model_cfg: ModelConfig, train_cfg: TrainConfig) -> None:
    meta = {"variant": variant, "model": asdict(model_cfg), "train": asdict(train_cfg),
            "reweight": asdict(cfg.reweight), **extra_meta}
    save_checkpoint(params, out / CHECKPOINT, meta)
    atomic_write_text(out / RUN_CONFIG, cfg.to_yaml())


# ---------------------------------------------------------------- subcommands


def cmd_simulate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    if _done(out / "manifest.json", args.force):
        return 0
    bundle = pl.make_bundle(cfg.simulator.ranges, cfg.simulator.real_scenario(), cfg.dataset)
    ds.save(bundle, out)
    print(f"wrote bundle to {out}: {len(bundle.sim)} sim, {len(bundle.val)} val, "
          f"{len(bundle.test)} test windows (checksum {bundle.checksum()[:12]})")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    if _done(out / RUN_CONFIG, args.force):
        return 0
    bundle = _load_bundle(args.bundle)
    _check_geometry(cfg, bundle)
    if args.single_task is not None:
        name, task = "single_task", _task_index(args.single_task)
    elif cfg.train.weighting_mode == "average":
        name, task = "average_weighting", 0
    else:
        name, task = "full", 0
    variant = pl.make_variant(name, cfg.model, cfg.train, task)
    weights = None
    source = args.sample_weights or "uniform"
    if source != "uniform":
        weights = read_weights(Path(source), [s.sample_id for s in bundle.sim])
    elif name == "full":
        variant = replace(variant, name="uniform_sample_weights")
    result = train(MSTNet(variant.model), bundle.sim, variant.train, sample_weights=weights)
    atomic_write_text(out / "history.csv", csv_text(result.history, TRAIN_COLUMNS))
    _write_run(out, cfg, variant.name, result.params,
               {"sample_weights": source, "task_weights": result.task_weights.weights.tolist(),
                "dataset_checksum": bundle.checksum()},
               variant.model, variant.train)
    print(f"trained {variant.name} for {variant.train.epochs} epochs; final total loss "
          f"{result.history[-1]['total']:.6f}")
    return 0


def cmd_reweight(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    if _done(out / RUN_CONFIG, args.force):
        return 0
    bundle = _load_bundle(args.bundle)
    _check_geometry(cfg, bundle)
    variant = pl.make_variant("full", cfg.model, cfg.train)
    fitted = pl.fit(variant, bundle.sim, bundle.val, cfg.reweight)
    result = fitted.reweight
    ids = [s.sample_id for s in bundle.sim]
    rows = [{"sample_id": i, "raw_w": float(w), "sigmoid_w": float(s)}
            for i, w, s in zip(ids, result.w, result.sigmoid_w)]
    atomic_write_text(out / "weights.csv", csv_text(rows, WEIGHT_COLUMNS))
    atomic_write_text(out / "history.csv", csv_text(result.history, HISTORY_COLUMNS))
    atomic_write_text(out / "warmup_history.csv", csv_text(fitted.warmup.history, TRAIN_COLUMNS))
    if fitted.retrain is not None:
        atomic_write_text(out / "retrain_history.csv",
                          csv_text(fitted.retrain.history, TRAIN_COLUMNS))
    _write_run(out, cfg, "full", fitted.params,
               {"n_planes": len(result.planes), "iterations": result.state.t,
                "task_weights": fitted.warmup.task_weights.weights.tolist(),
                "dataset_checksum": bundle.checksum()},
               variant.model, variant.train)
    s = result.sigmoid_w
    print(f"reweighted {len(s)} samples in {result.state.t} iterations; "
          f"sigmoid(w) mean {s.mean():.4f} min {s.min():.4f} max {s.max():.4f}; "
          f"{len(result.planes)} active planes")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    if _done(out, args.force):
        return 0
    run = Path(args.run)
    params, meta = load_checkpoint(run / CHECKPOINT)
    try:
        model_cfg = ModelConfig(**meta["model"])
    except (KeyError, TypeError) as exc:
        raise IoError(f"checkpoint {run} lacks a usable model config: {exc}") from exc
    model = MSTNet(model_cfg)
    bundle = _load_bundle(args.bundle)
    for key in ("L_in", "L_token", "L_out", "patch_rows", "patch_cols"):
        if getattr(bundle.config, key) != getattr(model_cfg, key):
            raise ConfigError(f"checkpoint expects {key}={getattr(model_cfg, key)}, "
                              f"bundle has {getattr(bundle.config, key)}")
    if len(params) != len(model.init_params(np.random.default_rng(0))):
        raise ShapeMismatch("checkpoint does not match its model config")
    echo = {k: meta[k] for k in ("model", "train", "reweight") if k in meta}
    echo["weighting_mode"] = meta.get("train", {}).get("weighting_mode")
    report = ev.evaluate(model, params, bundle, meta.get("variant", "full"),
                         meta.get("train", {}).get("seed", 0), echo)
    atomic_write_text(out, report.to_json(include_timing=False))
    atomic_write_text(out.with_name(out.name + TIMING_SUFFIX),
                      json.dumps({"wall_clock_s": report.wall_clock_s}))
    for line in report.lines("test"):
        print(line)
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    bundle = _load_bundle(args.bundle)
    _check_geometry(cfg, bundle)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else cfg.eval.seeds
    variants = args.variants.split(",") if args.variants else cfg.eval.variants
    for v in variants:
        pl.make_variant(v, cfg.model, cfg.train, cfg.eval.single_task)
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    exp = ev.ExperimentConfig(cfg.model, cfg.train, cfg.reweight)
    reports, todo = {}, []
    for v in variants:
        for seed in seeds:
            path = out / f"{v}_seed{seed}.json"
            if path.is_file() and not args.force:
                reports[(v, seed)] = ev.MetricsReport.from_dict(json.loads(path.read_text("utf-8")))
            else:
                todo.append((v, seed))
    if todo:
        jobs = [(v, bundle, exp, seed, cfg.eval.single_task) for v, seed in todo]
        if args.jobs == 1:
            fresh = [ev._run_job(j) for j in jobs]
        else:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                fresh = list(pool.map(ev._run_job, jobs))
        for (v, seed), report in zip(todo, fresh):
            path = out / f"{v}_seed{seed}.json"
            atomic_write_text(path, report.to_json(include_timing=False))
            atomic_write_text(path.with_name(path.name + TIMING_SUFFIX),
                              json.dumps({"wall_clock_s": report.wall_clock_s}))
            reports[(v, seed)] = report
    ordered = [reports[(v, s)] for v in variants for s in seeds]
    atomic_write_text(out / "aggregate.csv", csv_text(ev.aggregate_rows(ordered), ev.AGGREGATE_COLUMNS))
    for row in ev.aggregate_rows(ordered):
        print(",".join(str(row[c]) for c in ev.AGGREGATE_COLUMNS))
    return 0


def cmd_compare(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    if _done(out, args.force):
        return 0
    bundle = _load_bundle(args.bundle)
    _check_geometry(cfg, bundle)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else cfg.eval.seeds
    exp = ev.ExperimentConfig(cfg.model, cfg.train, cfg.reweight)
    summary = ev.compare_reweighting(bundle, seeds, exp, cfg.eval.corruption_samples,
                                     cfg.eval.corrupt_fraction)
    atomic_write_text(out, json.dumps(summary, indent=2, sort_keys=True))
    for r in summary["per_seed"]:
        print(f"seed {r['seed']}: sigmoid gap {r['sigma_gap']:.3f}, "
              f"test MAE uniform {r['mae_uniform']:.3f} reweighted {r['mae_reweighted']:.3f}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    results = gc.run_suite(range(args.seeds), args.coords)
    summary = gc.summarize(results)
    worst = 0.0
    for name, (err, tol) in summary.items():
        worst = max(worst, err)
        print(f"{name:12s} max_rel_error {err:.3e}  tol {tol:.0e}  {'ok' if err <= tol else 'FAIL'}")
    print(f"max relative error {worst:.3e}")
    return 0 if worst <= gc.END_TO_END_TOL else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simreweight",
        description="Simulated traffic, sample reweighting and multi-task forecasting.",
        epilog=f"Set {LOG_ENV}=DEBUG|INFO|WARNING|ERROR to control log verbosity.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p, outputs: bool = True):
        p.add_argument("--config", help="YAML run configuration (sections simulator, dataset, "
                                        "model, reweight, train, eval)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config field by dotted key, e.g. model.d_model=16; "
                            "repeatable")
        if outputs:
            p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("simulate", help="generate the simulated pool and real environment")
    common(p)
    p.add_argument("--seed", type=int, help="pool seed (dataset.seed)")
    p.add_argument("--out", required=True, help="bundle directory to write")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the multi-task model on the simulated split")
    common(p)
    p.add_argument("--bundle", required=True, help="bundle directory from simulate")
    p.add_argument("--out", required=True, help="run directory to write")
    p.add_argument("--seed", type=int, help="training seed (train.seed)")
    p.add_argument("--weighting", choices=("dynamic", "average"), help="task weighting mode")
    p.add_argument("--single-task", choices=TASKS, help="train one task only")
    p.add_argument("--sample-weights", metavar="FILE|uniform",
                   help="weights CSV from reweight, or 'uniform' (default)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reweight", help="warm-up training, then the cutting-plane reweighter")
    common(p)
    p.add_argument("--bundle", required=True, help="bundle directory from simulate")
    p.add_argument("--out", required=True, help="run directory to write")
    p.add_argument("--seed", type=int, help="training seed (train.seed)")
    p.add_argument("--plane-offset", choices=("residual", "paper"),
                   help="cut offset: 'residual' subtracts eps, 'paper' omits it")
    p.add_argument("--retrain-with-weights", action="store_true",
                   help="retrain from scratch with sigmoid(w) instead of keeping the solver's model")
    p.set_defaults(func=cmd_reweight)

    p = sub.add_parser("evaluate", help="MAE / RMSE report for a trained run")
    common(p)
    p.add_argument("--bundle", required=True, help="bundle directory from simulate")
    p.add_argument("--run", required=True, help="run directory from train or reweight")
    p.add_argument("--out", required=True, help="report JSON to write")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="ablation matrix over variants and seeds")
    common(p)
    p.add_argument("--bundle", required=True, help="bundle directory from simulate")
    p.add_argument("--out", required=True, help="directory for per-run reports and aggregate.csv")
    p.add_argument("--seeds", help="comma-separated seeds (default eval.seeds)")
    p.add_argument("--variants", help=f"comma-separated subset of {','.join(pl.VARIANTS)}")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("compare", help="uniform vs reweighted on the corrupted-target benchmark")
    common(p)
    p.add_argument("--bundle", required=True, help="bundle directory from simulate")
    p.add_argument("--out", required=True, help="summary JSON to write")
    p.add_argument("--seeds", help="comma-separated seeds (default eval.seeds)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds (default 10)")
    p.add_argument("--coords", type=int, default=2,
                   help="sampled entries per model parameter tensor (default 2)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _resolve_config(args) -> RunConfig:
    overrides = _overrides(args) if hasattr(args, "set") else {}
    flag_map = {
        "simulate": {"seed": "dataset.seed"},
        "train": {"seed": "train.seed", "weighting": "train.weighting_mode"},
        "reweight": {"seed": "train.seed", "plane_offset": "reweight.plane_offset"},
    }
    for attr, key in flag_map.get(args.command, {}).items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "retrain_with_weights", False):
        overrides["reweight.retrain_with_weights"] = True
    return load_config(getattr(args, "config", None), overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        configure_logging()
        cfg = _resolve_config(args)
        return args.func(args, cfg)
    except (ConfigError, ShapeMismatch) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IoError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (Diverged, ZeroTotalLoss) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SimReweightError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
