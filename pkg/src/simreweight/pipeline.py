"""Wiring between the model, the trainer and the reweighter.

A fit is a warm-up run of the multi-task trainer on the simulated split,
followed (unless the variant skips it) by the bilevel reweighter started from
the warm-up parameters. The reweighter's final parameters are the model,
or, with ``retrain_with_weights``, a fresh trainer run weighted by sigmoid(w).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import reweighter as rw
from .dataset import DatasetBundle, DatasetConfig, build_bundle, normalize
from .errors import ConfigError
from .model import MSTNet, ModelConfig
from .params import ParamVector
from .simulator import TASKS, ScenarioConfig, make_real_env, make_sim_pool
from .trainer import TaskWeights, TrainConfig, TrainResult, total_loss, train

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_interaction", "no_spatial", "average_weighting",
            "uniform_sample_weights", "single_task")


@dataclass
class Variant:
    name: str
    model: ModelConfig
    train: TrainConfig
    reweight: bool


def make_variant(name: str, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 single_task: int = 0) -> Variant:
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    m, t, reweight = replace(model_cfg), replace(train_cfg), True
    if name == "no_interaction":
        m.use_interaction = False
    elif name == "no_spatial":
        m.use_spatial = False
    elif name == "average_weighting":
        t.weighting_mode = "average"
    elif name == "uniform_sample_weights":
        reweight = False
    elif name == "single_task":
        if single_task not in range(len(TASKS)):
            raise ConfigError(f"single task index must be in 0..{len(TASKS) - 1}")
        m.tasks = [single_task]
    return Variant(name, m.validate(), t.validate(), reweight)


def model_problem(model: MSTNet, params: ParamVector, sim_samples: list, val_samples: list,
                  task_weights: TaskWeights, weighting_mode: str = "dynamic",
                  sample_ids=None) -> rw.BilevelProblem:
    """Per-sample task-weighted loss on ``sim_samples``; mean of the same on ``val_samples``.

    Task weights are frozen for the whole reweighting run. Dropout is off.
    """
    sim_batch = model.batch(sim_samples)
    val_batch = model.batch(val_samples)

    def sim_losses(phi):
        return total_loss(task_weights, model.sample_task_losses(phi, sim_batch), weighting_mode)

    def val_loss(phi):
        return ad.mean(total_loss(task_weights, model.sample_task_losses(phi, val_batch),
                                  weighting_mode))

    if sample_ids is None:
        sample_ids = [s.sample_id for s in sim_samples]
    return rw.BilevelProblem(params, sim_losses, val_loss, len(sim_samples), sample_ids)


@dataclass
class FitResult:
    variant: Variant
    params: ParamVector
    warmup: TrainResult
    reweight: rw.ReweightResult | None = None
    retrain: TrainResult | None = None

    @property
    def sample_weights(self) -> np.ndarray | None:
        return None if self.reweight is None else self.reweight.w


def fit(variant: Variant, sim_samples: list, val_samples: list,
        reweight_cfg: rw.ReweightConfig, sample_weights: np.ndarray | None = None) -> FitResult:
    """Warm-up training, then reweighting (or a weighted trainer run if weights are given).

    Passing ``sample_weights`` skips the bilevel solve and trains once with them,
    which is how externally supplied weights are consumed.
    """
    model = MSTNet(variant.model)
    if sample_weights is not None:
        result = train(model, sim_samples, variant.train, sample_weights=sample_weights)
        return FitResult(variant, result.params, result)
    warm = train(model, sim_samples, variant.train)
    if not variant.reweight:
        return FitResult(variant, warm.params, warm)
    problem = model_problem(model, warm.params, sim_samples, val_samples, warm.task_weights,
                            variant.train.weighting_mode)
    result = rw.run(problem, reweight_cfg)
    fitted = FitResult(variant, result.params, warm, result)
    if reweight_cfg.retrain_with_weights:
        fitted.retrain = train(model, sim_samples, variant.train, sample_weights=result.w)
        fitted.params = fitted.retrain.params
    return fitted


def make_bundle(ranges: dict, real_scenario: ScenarioConfig, dataset_cfg: DatasetConfig) -> DatasetBundle:
    """Simulated pool + reference environment, windowed and normalized."""
    dataset_cfg.validate()
    pool = make_sim_pool(ranges, dataset_cfg.n_scenarios, dataset_cfg.seed)
    meta = {"n_scenarios": dataset_cfg.n_scenarios, "seed": dataset_cfg.seed}
    return normalize(build_bundle(pool, make_real_env(real_scenario), dataset_cfg, meta))
