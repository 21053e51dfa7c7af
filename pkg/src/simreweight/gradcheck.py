"""Finite-difference checks of every differentiable primitive and of the model loss.

Each primitive's output is contracted with a fixed random tensor so the
checked scalar exercises every output element with a distinct cotangent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import Batch, MSTNet, ModelConfig
from .simulator import rng_stream

PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3
FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _away_from_zero(rng, shape, margin=0.3):
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + margin)


def primitive_cases(rng: np.random.Generator) -> list:
    """(name, fn, bindings) triples; fn maps name -> Tensor bindings to any-shape Tensor."""
    n = rng.standard_normal
    pos = lambda *s: rng.uniform(0.5, 2.0, s)
    idx = np.array([2, 0, 2, 1])
    mask = ad.causal_mask(4)
    return [
        ("add", lambda t: ad.add(t["a"], t["b"]), {"a": n((3, 4)), "b": n((4,))}),
        ("sub", lambda t: ad.sub(t["a"], t["b"]), {"a": n((3, 1)), "b": n((3, 4))}),
        ("mul", lambda t: ad.mul(t["a"], t["b"]), {"a": n((2, 3)), "b": n((2, 3))}),
        ("div", lambda t: ad.div(t["a"], t["b"]), {"a": n((2, 3)), "b": pos(2, 3)}),
        ("neg", lambda t: ad.neg(t["a"]), {"a": n((5,))}),
        ("power", lambda t: ad.power(t["a"], 2.5), {"a": pos(3, 2)}),
        ("sqrt", lambda t: ad.sqrt(t["a"]), {"a": pos(4)}),
        ("exp", lambda t: ad.exp(t["a"]), {"a": n((3, 3))}),
        ("log", lambda t: ad.log(t["a"]), {"a": pos(3, 3)}),
        ("sigmoid", lambda t: ad.sigmoid(t["a"]), {"a": n((6,)) * 3}),
        ("tanh", lambda t: ad.tanh(t["a"]), {"a": n((6,))}),
        ("relu", lambda t: ad.relu(t["a"]), {"a": _away_from_zero(rng, (3, 4))}),
        ("absolute", lambda t: ad.absolute(t["a"]), {"a": _away_from_zero(rng, (3, 4))}),
        ("tsum", lambda t: ad.tsum(t["a"], axis=1, keepdims=True), {"a": n((2, 3, 4))}),
        ("mean", lambda t: ad.mean(t["a"], axis=(0, 2)), {"a": n((2, 3, 4))}),
        ("reshape", lambda t: ad.reshape(t["a"], (4, 6)), {"a": n((2, 3, 4))}),
        ("transpose", lambda t: ad.transpose(t["a"], (2, 0, 1)), {"a": n((2, 3, 4))}),
        ("getitem", lambda t: ad.getitem(t["a"], (slice(None), idx)), {"a": n((2, 3))}),
        ("scatter", lambda t: ad.scatter(t["a"], (3, 5), (idx[:3], slice(1, 3))), {"a": n((3, 2))}),
        ("concat", lambda t: ad.concat([t["a"], t["b"]], axis=-1), {"a": n((2, 3)), "b": n((2, 2))}),
        ("stack", lambda t: ad.stack([t["a"], t["b"]], axis=1), {"a": n((2, 3)), "b": n((2, 3))}),
        ("pad2d", lambda t: ad.pad2d(t["a"], 1), {"a": n((2, 3, 3))}),
        ("matmul", lambda t: ad.matmul(t["a"], t["b"]), {"a": n((2, 3, 4)), "b": n((4, 5))}),
        ("softmax", lambda t: ad.softmax(t["a"], axis=-1), {"a": n((3, 5))}),
        ("layer_norm", lambda t: ad.layer_norm(t["x"], t["g"], t["b"]),
         {"x": n((3, 6)), "g": n((6,)), "b": n((6,))}),
        ("linear", lambda t: ad.linear(t["x"], t["w"], t["b"]),
         {"x": n((2, 5, 4)), "w": n((2, 4, 3)), "b": n((2, 1, 3))}),
        ("conv2d", lambda t: ad.conv2d(t["x"], t["w"], t["b"]),
         {"x": n((2, 1, 2, 3, 3)), "w": n((2, 3, 2, 3, 3)), "b": n((2, 3))}),
        ("attention", lambda t: ad.attention(t["q"], t["k"], t["v"], mask=mask),
         {"q": n((2, 4, 3)), "k": n((2, 4, 3)), "v": n((2, 4, 2))}),
    ]


def _contracted(fn, weights_rng: np.random.Generator, bindings: dict):
    with ad.no_grad():
        shape = fn({k: ad.Tensor(v) for k, v in bindings.items()}).shape
    cotangent = weights_rng.standard_normal(shape)
    return lambda t: ad.tsum(ad.mul(fn(t), cotangent))


def check(fn, bindings: dict, step: float = FD_STEP, names=None) -> float:
    """Largest relative error between reverse-mode and central-difference gradients."""
    _, analytic = ad.value_and_grad(fn, bindings)
    numeric = ad.numeric_grad(fn, bindings, step, names)
    return max(ad.relative_error(analytic[k], numeric[k]) for k in numeric)


def check_primitives(seed: int) -> list:
    rng = rng_stream(seed, 40)
    results = []
    for name, fn, bindings in primitive_cases(rng):
        scalar = _contracted(fn, rng, bindings)
        results.append(CheckResult(name, check(scalar, bindings), PRIMITIVE_TOL))
    return results


def tiny_model_config() -> ModelConfig:
    return ModelConfig(d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, cnn_channels=2,
                       mlp_hidden=8, dropout_rate=0.0, L_in=8, L_token=4, L_out=3)


def check_model_loss(seed: int, n_coords: int = 2, batch_size: int = 2) -> CheckResult:
    """End-to-end task loss of a tiny model; ``n_coords`` sampled entries per parameter tensor."""
    cfg = tiny_model_config()
    model = MSTNet(cfg)
    rng = rng_stream(seed, 41)
    params = model.init_params(rng)
    L = cfg.L_in + cfg.L_out
    batch = Batch(x=rng.standard_normal((batch_size, cfg.n_tasks, cfg.L_in, cfg.patch_cells)),
                  y=rng.standard_normal((batch_size, cfg.n_tasks, cfg.L_out)),
                  hour=rng.integers(0, cfg.hours_per_day, (batch_size, L)),
                  dow=rng.integers(0, 7, (batch_size, L)))
    task_w = rng.dirichlet(np.ones(cfg.n_tasks))

    def loss(p):
        per = model.sample_task_losses(p, batch)
        return ad.mean(ad.tsum(ad.mul(per, task_w), axis=-1))

    arrays = params.arrays()
    _, analytic = ad.value_and_grad(loss, arrays)
    base = {k: v.copy() for k, v in arrays.items()}
    worst = 0.0
    for name, arr in base.items():
        flat_idx = rng.choice(arr.size, min(n_coords, arr.size), replace=False)
        for fi in flat_idx:
            i = np.unravel_index(fi, arr.shape)
            orig = arr[i]
            arr[i] = orig + FD_STEP
            fp = float(ad.evaluate(loss, base))
            arr[i] = orig - FD_STEP
            fm = float(ad.evaluate(loss, base))
            arr[i] = orig
            numeric = (fp - fm) / (2 * FD_STEP)
            worst = max(worst, ad.relative_error(analytic[name][i], numeric))
    return CheckResult("model_loss", worst, END_TO_END_TOL)


def run_suite(seeds=range(10), n_coords: int = 2) -> list:
    results = []
    for seed in seeds:
        results.extend(check_primitives(seed))
        results.append(check_model_loss(seed, n_coords))
    return results


def summarize(results: list) -> dict:
    """name -> (max relative error over seeds, tolerance)."""
    out: dict = {}
    for r in results:
        prev = out.get(r.name, (0.0, r.tolerance))[0]
        out[r.name] = (max(prev, r.max_rel_error), r.tolerance)
    return out
