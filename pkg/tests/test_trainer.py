from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simreweight import autodiff as ad
from simreweight.errors import ConfigError, ZeroTotalLoss
from simreweight.model import MSTNet
from simreweight.trainer import (TaskWeights, TrainConfig, clip_by_global_norm, total_loss, train,
                                 update_task_weights)

from conftest import small_model_config


def test_update_hand_example():
    new = update_task_weights(TaskWeights(np.array([0.5, 0.3, 0.2]), 0.5), [1.0, 1.0, 2.0])
    np.testing.assert_allclose(new.weights, [0.375, 0.275, 0.35], rtol=0, atol=1e-15)


def test_total_loss_examples():
    assert total_loss(TaskWeights.uniform(), [3.0, 3.0, 3.0]) == pytest.approx(3.0, abs=1e-15)
    assert total_loss(TaskWeights(np.array([1.0, 0.0, 0.0])), [2.5, 7.0, 9.0]) == 2.5
    tw = TaskWeights(np.array([0.375, 0.275, 0.35]))
    assert total_loss(tw, [1.0, 1.0, 2.0]) == pytest.approx(1.35, abs=1e-15)


def test_average_mode_ignores_weights():
    tw = TaskWeights(np.array([1.0, 0.0, 0.0]))
    assert total_loss(tw, [3.0, 6.0, 9.0], "average") == pytest.approx(6.0)
    t = total_loss(tw, ad.Tensor(np.array([[3.0, 6.0, 9.0]])), "average")
    np.testing.assert_allclose(t.data, [6.0])


def test_zero_total_loss_is_an_error():
    with pytest.raises(ZeroTotalLoss):
        update_task_weights(TaskWeights.uniform(), [0.0, 0.0, 0.0])
    with pytest.raises(ConfigError):
        update_task_weights(TaskWeights.uniform(), [1.0, -1.0, 1.0])


def simplex_weights():
    return st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3).filter(lambda v: sum(v) > 1e-3) \
        .map(lambda v: np.array(v) / np.sum(v))


positive_losses = st.lists(st.floats(1e-6, 1e6), min_size=3, max_size=3).map(np.array)


@settings(max_examples=1000, deadline=None)
@given(w=simplex_weights(), losses=positive_losses, alpha=st.floats(0.0, 1.0))
def test_dynamic_weighting_invariants(w, losses, alpha):
    new = update_task_weights(TaskWeights(w, alpha), losses).weights
    assert abs(new.sum() - 1.0) <= 1e-12
    assert np.all(new >= 0)
    if alpha == 0.0:
        assert np.array_equal(update_task_weights(TaskWeights(w, 0.0), losses).weights, w)
    ones = update_task_weights(TaskWeights(w, 1.0), losses).weights
    np.testing.assert_allclose(ones, losses / losses.sum(), rtol=1e-12, atol=0)
    fixed = update_task_weights(TaskWeights.uniform(3, alpha), np.full(3, losses[0])).weights
    np.testing.assert_allclose(fixed, np.full(3, 1 / 3), rtol=0, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(shared=st.floats(0.01, 0.98), la=st.floats(1e-3, 1e3), ratio=st.floats(1.001, 100.0),
       alpha=st.floats(1e-3, 1.0))
def test_larger_loss_gains_weight(shared, la, ratio, alpha):
    w = np.array([shared / 2, shared / 2, 1 - shared])
    new = update_task_weights(TaskWeights(w, alpha), [la * ratio, la, 1.0]).weights
    assert new[0] > new[1]


def test_clip_by_global_norm():
    grads = [np.array([3.0, 0.0]), np.array([[4.0]])]
    clipped = clip_by_global_norm(grads, 1.0)
    assert np.sqrt(sum(np.sum(g * g) for g in clipped)) == pytest.approx(1.0)
    assert clip_by_global_norm(grads, 10.0) is grads


@pytest.fixture(scope="module")
def small_setup(tiny_bundle):
    cfg = small_model_config(dropout_rate=0.1)
    return MSTNet(cfg), tiny_bundle.sim[:24]


def test_training_is_deterministic(small_setup):
    model, samples = small_setup
    cfg = TrainConfig(epochs=2, batch_size=8, seed=3)
    a, b = train(model, samples, cfg), train(model, samples, cfg)
    assert np.array_equal(a.params.flat, b.params.flat)
    assert a.history == b.history
    assert np.array_equal(a.task_weights.weights, b.task_weights.weights)


def test_history_rows_and_weight_trajectory(small_setup):
    model, samples = small_setup
    result = train(model, samples, TrainConfig(epochs=3, batch_size=8, alpha=0.5))
    assert list(result.history[0]) == ["epoch", "loss_call", "loss_sms", "loss_net",
                                       "w_call", "w_sms", "w_net", "total"]
    assert result.history[0]["w_call"] == pytest.approx(1 / 3)
    for row, nxt in zip(result.history, result.history[1:]):
        losses = np.array([row["loss_call"], row["loss_sms"], row["loss_net"]])
        prev = np.array([row["w_call"], row["w_sms"], row["w_net"]])
        expected = 0.5 * prev + 0.5 * losses / losses.sum()
        np.testing.assert_allclose([nxt["w_call"], nxt["w_sms"], nxt["w_net"]], expected, atol=1e-12)


def test_average_mode_keeps_uniform_weights(small_setup):
    model, samples = small_setup
    result = train(model, samples, TrainConfig(epochs=2, batch_size=8, weighting_mode="average"))
    for row in result.history:
        assert (row["w_call"], row["w_sms"], row["w_net"]) == (1 / 3, 1 / 3, 1 / 3)


def test_training_reduces_loss(small_setup):
    model, samples = small_setup
    result = train(model, samples, TrainConfig(epochs=6, batch_size=8))
    assert result.history[-1]["total"] < result.history[0]["total"]


def test_sample_weights_are_used(small_setup):
    model, samples = small_setup
    cfg = TrainConfig(epochs=1, batch_size=8)
    plain = train(model, samples, cfg).params.flat
    zeros = train(model, samples, cfg, sample_weights=np.zeros(len(samples))).params.flat
    # equal logits normalize away within each minibatch
    np.testing.assert_allclose(zeros, plain, rtol=0, atol=1e-12)
    skewed = np.where(np.arange(len(samples)) % 2 == 0, 4.0, -4.0)
    assert not np.allclose(train(model, samples, cfg, sample_weights=skewed).params.flat, plain)
    with pytest.raises(ConfigError):
        train(model, samples, cfg, sample_weights=np.zeros(3))


def test_single_task_history_blanks_other_tasks(tiny_bundle):
    model = MSTNet(small_model_config(tasks=[2]))
    result = train(model, tiny_bundle.sim[:16], TrainConfig(epochs=1, batch_size=8))
    row = result.history[0]
    assert row["loss_call"] == "" and row["w_sms"] == ""
    assert row["w_net"] == 1.0


def test_config_validation():
    for bad in (dict(epochs=0), dict(alpha=1.5), dict(weighting_mode="fancy"), dict(clip_norm=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()
