"""Multi-task training with exponentially smoothed, loss-proportional task weights."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, Diverged, ZeroTotalLoss
from .model import Batch, MSTNet
from .params import ParamVector
from .simulator import TASKS, rng_stream

log = logging.getLogger(__name__)

WEIGHTING_MODES = ("dynamic", "average")
HISTORY_COLUMNS = ["epoch", "loss_call", "loss_sms", "loss_net", "w_call", "w_sms", "w_net", "total"]


@dataclass
class TaskWeights:
    weights: np.ndarray
    alpha: float = 0.3

    @classmethod
    def uniform(cls, n_tasks: int = 3, alpha: float = 0.3) -> "TaskWeights":
        return cls(np.full(n_tasks, 1.0 / n_tasks), alpha)


def update_task_weights(tw: TaskWeights, losses) -> TaskWeights:
    """w <- (1 - alpha) w + alpha * L / sum(L)."""
    losses = np.asarray(losses, dtype=np.float64)
    if np.any(losses < 0) or not np.all(np.isfinite(losses)):
        raise ConfigError(f"task losses must be finite and nonnegative, got {losses}")
    total = losses.sum()
    if total <= 0:
        raise ZeroTotalLoss("sum of task losses is zero")
    new = (1.0 - tw.alpha) * tw.weights + tw.alpha * (losses / total)
    return TaskWeights(new, tw.alpha)


def total_loss(tw: TaskWeights, losses, mode: str = "dynamic"):
    """Weighted task sum; ``average`` mode ignores ``tw`` and uses 1/n each.

    ``losses`` may be floats or tensors with the task axis last.
    """
    n = len(tw.weights)
    weights = tw.weights if mode == "dynamic" else np.full(n, 1.0 / n)
    if isinstance(losses, ad.Tensor):
        return ad.tsum(ad.mul(losses, weights), axis=-1)
    return float(np.dot(weights, np.asarray(losses, dtype=np.float64)))


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 0.05
    alpha: float = 0.3
    seed: int = 0
    weighting_mode: str = "dynamic"
    clip_norm: float = 5.0

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0 or self.clip_norm <= 0:
            raise ConfigError("train.epochs, batch_size, learning_rate, clip_norm must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("train.alpha must lie in [0, 1]")
        if self.weighting_mode not in WEIGHTING_MODES:
            raise ConfigError(f"train.weighting_mode must be one of {WEIGHTING_MODES}")
        return self


@dataclass
class TrainResult:
    params: ParamVector
    task_weights: TaskWeights
    history: list = field(default_factory=list)


def clip_by_global_norm(grads: list, max_norm: float) -> list:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if not np.isfinite(norm):
        raise Diverged("non-finite gradient norm")
    if norm <= max_norm:
        return grads
    return [g * (max_norm / norm) for g in grads]


def history_row(epoch: int, losses, weights, total: float, n_tasks_all: int = len(TASKS),
                tasks=None) -> dict:
    """Per-epoch CSV row; tasks a single-task model does not train are left blank."""
    tasks = list(range(n_tasks_all)) if tasks is None else list(tasks)
    row = {"epoch": epoch}
    for prefix, values in (("loss", losses), ("w", weights)):
        for i, name in enumerate(TASKS):
            row[f"{prefix}_{name}"] = float(values[tasks.index(i)]) if i in tasks else ""
    row["total"] = float(total)
    return row


def train(model: MSTNet, samples: list, cfg: TrainConfig, sample_weights: np.ndarray | None = None,
          params: ParamVector | None = None, task_weights: TaskWeights | None = None) -> TrainResult:
    """Minibatch gradient descent on the task-weighted loss.

    ``sample_weights`` are raw logits (one per sample); each sample then counts
    with sigmoid(w_i), normalized within every minibatch. Task weights follow
    the smoothed update once per epoch from epoch-mean task losses.
    """
    cfg.validate()
    n_tasks = model.cfg.n_tasks
    rng = rng_stream(cfg.seed, 10)
    if params is None:
        params = model.init_params(rng_stream(cfg.seed, 11))
    tw = task_weights or TaskWeights.uniform(n_tasks, cfg.alpha)
    tw = TaskWeights(np.array(tw.weights, dtype=np.float64), cfg.alpha)
    full = model.batch(samples)
    n = len(full)
    if sample_weights is None:
        s_weights = np.ones(n)
    else:
        sample_weights = np.asarray(sample_weights, dtype=np.float64)
        if sample_weights.shape != (n,):
            raise ConfigError(f"expected {n} sample weights, got {sample_weights.shape}")
        s_weights = 0.5 * (1.0 + np.tanh(0.5 * sample_weights))
    flat = params.flat.copy()
    names = params.names()
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum = np.zeros(n_tasks)
        weight_sum = 0.0
        used = tw.weights if cfg.weighting_mode == "dynamic" else np.full(n_tasks, 1.0 / n_tasks)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = full.take(idx)
            sw = s_weights[idx]
            sw_norm = sw / sw.sum()
            p = params.with_flat(flat).tensors(requires_grad=True)
            per_task = model.sample_task_losses(p, batch, rng=rng)  # [B, T]
            per_sample = total_loss(tw, per_task, cfg.weighting_mode)
            loss = ad.tsum(ad.mul(per_sample, sw_norm))
            grads = ad.grad(loss, [p[k] for k in names])
            grads = clip_by_global_norm([g.data for g in grads], cfg.clip_norm)
            flat = flat - cfg.learning_rate * np.concatenate([g.ravel() for g in grads])
            if not np.all(np.isfinite(flat)):
                raise Diverged(f"parameters became non-finite in epoch {epoch}")
            loss_sum += (per_task.data * sw[:, None]).sum(axis=0)
            weight_sum += sw.sum()
        epoch_losses = loss_sum / weight_sum
        total = float(np.dot(used, epoch_losses))
        history.append(history_row(epoch, epoch_losses, used, total, tasks=model.cfg.tasks))
        log.debug("epoch %d losses %s weights %s", epoch, epoch_losses, used)
        if cfg.weighting_mode == "dynamic":
            tw = update_task_weights(tw, epoch_losses)
    return TrainResult(params.with_flat(flat), tw, history)


def evaluate_losses(model: MSTNet, params: ParamVector, samples: list) -> np.ndarray:
    """Mean per-task MSE (normalized units) of ``params`` on ``samples``."""
    batch = model.batch(samples)
    with ad.no_grad():
        per_task = model.sample_task_losses(params.tensors(), batch)
    return per_task.data.mean(axis=0)


def batch_of(model: MSTNet, samples: list) -> Batch:
    return model.batch(samples)
