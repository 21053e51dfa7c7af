"""Metrics, reports, the ablation matrix and the corruption benchmark."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import pipeline as pl
from .dataset import DatasetBundle
from .model import MSTNet, ModelConfig
from .params import ParamVector
from .reweighter import ReweightConfig
from .simulator import TASKS, rng_stream
from .trainer import TrainConfig

log = logging.getLogger(__name__)

AGGREGATE_COLUMNS = ["variant", "metric", *TASKS]
METRICS = ("mae", "rmse")
TASK_LABELS = {"call": "Call", "sms": "SMS", "net": "Net"}


def mae(pred, target) -> float:
    return float(np.mean(np.abs(np.asarray(pred, np.float64) - np.asarray(target, np.float64))))


def rmse(pred, target) -> float:
    diff = np.abs(np.asarray(pred, np.float64) - np.asarray(target, np.float64))
    scale = float(np.max(diff, initial=0.0))
    if scale == 0.0:
        return 0.0
    # scaling first keeps tiny errors from underflowing to zero when squared
    return scale * float(np.sqrt(np.mean((diff / scale) ** 2)))


def format_cell(task: str, mae_value: float, rmse_value: float) -> str:
    return f"{TASK_LABELS.get(task, task)} MAE {mae_value:.2f} / RMSE {rmse_value:.2f}"


@dataclass
class MetricsReport:
    """Per split, per task MAE / RMSE in traffic units, plus what produced them."""

    variant: str
    seed: int
    metrics: dict                      # split -> task -> {"mae", "rmse"}
    config: dict = field(default_factory=dict)
    dataset_checksum: str = ""
    wall_clock_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def cell(self, split: str, task: str, metric: str) -> float | None:
        return self.metrics.get(split, {}).get(task, {}).get(metric)

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock_s")
        return d

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["variant"], d["seed"], d["metrics"],
                   config=d.get("config", {}), dataset_checksum=d.get("dataset_checksum", ""),
                   wall_clock_s=d.get("wall_clock_s", 0.0), extra=d.get("extra", {}))

    def lines(self, split: str = "test") -> list:
        return [format_cell(task, m["mae"], m["rmse"]) for task, m in self.metrics.get(split, {}).items()]


def split_metrics(model: MSTNet, params: ParamVector, bundle: DatasetBundle, split: str) -> dict:
    samples = bundle.split(split)
    batch = model.batch(samples)
    tasks = model.cfg.tasks
    pred = model.predict(params, batch)  # [B, T_model, L_out]
    full_pred = np.zeros((len(samples), len(TASKS), pred.shape[-1]))
    full_true = np.stack([s.y for s in samples])
    full_pred[:, tasks] = pred
    pred_units = bundle.denormalize(full_pred)
    true_units = bundle.denormalize(full_true)
    return {TASKS[t]: {"mae": mae(pred_units[:, t], true_units[:, t]),
                       "rmse": rmse(pred_units[:, t], true_units[:, t])} for t in tasks}


def evaluate(model: MSTNet, params: ParamVector, bundle: DatasetBundle, variant: str = "full",
             seed: int = 0, config: dict | None = None, splits=("val", "test")) -> MetricsReport:
    t0 = time.perf_counter()
    metrics = {split: split_metrics(model, params, bundle, split) for split in splits}
    return MetricsReport(variant, int(seed), metrics, dict(config or {}), bundle.checksum(),
                         time.perf_counter() - t0)


def aggregate_rows(reports: list, split: str = "test") -> list:
    """Seed-averaged rows ``variant,metric,call,sms,net``; blank where a task was not trained."""
    variants = list(dict.fromkeys(r.variant for r in reports))
    rows = []
    for variant in variants:
        group = [r for r in reports if r.variant == variant]
        for metric in METRICS:
            row = {"variant": variant, "metric": metric.upper()}
            for task in TASKS:
                vals = [r.cell(split, task, metric) for r in group]
                vals = [v for v in vals if v is not None]
                row[task] = f"{np.mean(vals):.6f}" if vals else ""
            rows.append(row)
    return rows


# ---------------------------------------------------------------- experiment drivers


@dataclass
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig
    reweight: ReweightConfig

    def echo(self, variant: pl.Variant | None = None) -> dict:
        model = variant.model if variant else self.model
        train = variant.train if variant else self.train
        return {"model": asdict(model), "train": asdict(train), "reweight": asdict(self.reweight)}


def run_variant(name: str, bundle: DatasetBundle, exp: ExperimentConfig, seed: int,
                single_task: int = 0) -> MetricsReport:
    t0 = time.perf_counter()
    variant = pl.make_variant(name, exp.model, replace(exp.train, seed=seed), single_task)
    fitted = pl.fit(variant, bundle.sim, bundle.val, exp.reweight)
    report = evaluate(MSTNet(variant.model), fitted.params, bundle, name, seed, exp.echo(variant))
    report.wall_clock_s = time.perf_counter() - t0
    return report


def _run_job(args) -> MetricsReport:
    return run_variant(*args)


def run_ablation(variants, seeds, bundle: DatasetBundle, exp: ExperimentConfig,
                 jobs: int = 1, single_task: int = 0) -> list:
    """One report per (variant, seed); every run sees the same bundle."""
    job_args = [(v, bundle, exp, int(s), single_task) for v in variants for s in seeds]
    if jobs <= 1:
        return [_run_job(a) for a in job_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_job, job_args))


def ordering_wins(reports: list, full: str = "full", others=("no_interaction", "average_weighting"),
                  split: str = "test", metric: str = "mae") -> dict:
    """Per (other variant, task): number of seeds where ``full`` is no worse."""
    by_key = {(r.variant, r.seed): r for r in reports}
    seeds = sorted({r.seed for r in reports if r.variant == full})
    wins = {}
    for other in others:
        for task in TASKS:
            count = 0
            for seed in seeds:
                a = by_key[(full, seed)].cell(split, task, metric)
                b = by_key[(other, seed)].cell(split, task, metric)
                count += int(a <= b)
            wins[(other, task)] = count
    return wins


def corruption_benchmark(bundle: DatasetBundle, seed: int, n_samples: int = 40,
                         corrupt_fraction: float = 0.5) -> tuple:
    """Draw ``n_samples`` simulated windows; replace the targets of a fraction with N(0, 1) noise.

    Noise is drawn in normalized units, so it matches the clean targets in scale
    but carries no information about the inputs.
    """
    rng = rng_stream(seed, 30)
    idx = np.sort(rng.choice(len(bundle.sim), n_samples, replace=False))
    corrupted = np.zeros(n_samples, bool)
    corrupted[rng.choice(n_samples, int(round(corrupt_fraction * n_samples)), replace=False)] = True
    samples = []
    for i, j in enumerate(idx):
        s = bundle.sim[j]
        if corrupted[i]:
            s = replace(s, y=rng.standard_normal(s.y.shape))
        samples.append(s)
    return samples, corrupted


def compare_reweighting(bundle: DatasetBundle, seeds, exp: ExperimentConfig,
                        n_samples: int = 40, corrupt_fraction: float = 0.5) -> dict:
    """Uniform-weight vs reweighted model on the corruption benchmark, per seed.

    The uniform model is the reweighter's warm start, so both share data,
    initialization and minibatch order.
    """
    per_seed = []
    for seed in seeds:
        samples, corrupted = corruption_benchmark(bundle, seed, n_samples, corrupt_fraction)
        variant = pl.make_variant("full", exp.model, replace(exp.train, seed=int(seed)))
        fitted = pl.fit(variant, samples, bundle.val, exp.reweight)
        model = MSTNet(variant.model)
        s = fitted.reweight.sigmoid_w
        test_uniform = split_metrics(model, fitted.warmup.params, bundle, "test")
        test_reweighted = split_metrics(model, fitted.params, bundle, "test")
        mae_u = float(np.mean([m["mae"] for m in test_uniform.values()]))
        mae_r = float(np.mean([m["mae"] for m in test_reweighted.values()]))
        per_seed.append({
            "seed": int(seed),
            "sigma_clean": float(s[~corrupted].mean()),
            "sigma_corrupted": float(s[corrupted].mean()),
            "sigma_gap": float(s[~corrupted].mean() - s[corrupted].mean()),
            "mae_uniform": mae_u,
            "mae_reweighted": mae_r,
            "mae_delta": mae_r - mae_u,
        })
        log.info("corruption benchmark seed %s: %s", seed, per_seed[-1])
    return {
        "per_seed": per_seed,
        "mean_sigma_gap": float(np.mean([r["sigma_gap"] for r in per_seed])),
        "seeds_reweighted_no_worse": int(sum(r["mae_delta"] <= 0 for r in per_seed)),
    }
