from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from simreweight import autodiff as ad
from simreweight import gradcheck as gc
from simreweight.errors import NonFiniteValue, NonScalarOutput, ShapeMismatch


def test_identity_sigmoid_softmax_forward():
    assert ad.evaluate(lambda t: t["x"], {"x": np.array([3.0])}).tolist() == [3.0]
    assert ad.evaluate(lambda t: ad.sigmoid(t["x"]), {"x": np.array([0.0])}).tolist() == [0.5]
    out = ad.evaluate(lambda t: ad.softmax(t["x"]), {"x": np.ones(3)})
    np.testing.assert_allclose(out, np.full(3, 1 / 3), rtol=0, atol=1e-15)


def test_basic_derivatives():
    _, g = ad.value_and_grad(lambda t: ad.tsum(ad.sigmoid(t["x"])), {"x": np.array([0.0])})
    assert g["x"][0] == pytest.approx(0.25, abs=1e-15)
    _, g = ad.value_and_grad(lambda t: ad.tsum(ad.mul(t["x"], t["x"])), {"x": np.array([3.0])})
    assert g["x"][0] == 6.0


def test_random_three_layer_graph_matches_finite_differences():
    rng = np.random.default_rng(3)
    bindings = {"w1": rng.uniform(-1, 1, (4, 5)), "w2": rng.uniform(-1, 1, (5, 3)),
                "w3": rng.uniform(-1, 1, (3, 1)), "x": rng.uniform(-1, 1, (6, 4))}

    def f(t):
        h = ad.tanh(ad.matmul(t["x"], t["w1"]))
        h = ad.sigmoid(ad.matmul(h, t["w2"]))
        return ad.mean(ad.matmul(h, t["w3"]))

    assert gc.check(f, bindings) <= 1e-4


def test_identity_matmul_and_constant_layer_norm():
    a = np.array([[1.0, -2.0], [0.5, 4.0]])
    np.testing.assert_array_equal(ad.matmul(np.eye(2), a).data, a)
    assert np.all(ad.layer_norm(np.full((2, 5), 7.0)).data == 0.0)


def test_causal_attention_first_row_is_first_value():
    rng = np.random.default_rng(0)
    q, k, v = rng.standard_normal((3, 5, 4))
    out = ad.attention(q, k, v, mask=ad.causal_mask(5)).data
    np.testing.assert_allclose(out[0], v[0], rtol=0, atol=1e-15)


def test_causal_attention_rows_before_perturbation_unchanged():
    rng = np.random.default_rng(1)
    q, k, v = rng.standard_normal((3, 6, 4))
    base = ad.attention(q, k, v, mask=ad.causal_mask(6)).data
    for t in range(6):
        k2, v2, q2 = k.copy(), v.copy(), q.copy()
        k2[t] += 1.0
        v2[t] -= 2.0
        q2[t] += 0.5
        out = ad.attention(q2, k2, v2, mask=ad.causal_mask(6)).data
        np.testing.assert_allclose(out[:t], base[:t], rtol=0, atol=1e-12)


def test_abs_subgradient_at_zero_is_zero():
    _, g = ad.value_and_grad(lambda t: ad.tsum(ad.absolute(t["x"])), {"x": np.array([0.0, -2.0, 3.0])})
    np.testing.assert_array_equal(g["x"], [0.0, -1.0, 1.0])


def test_second_order_through_create_graph():
    x = ad.Tensor(np.array([1.5]), requires_grad=True)
    with ad.set_grad_enabled(True):
        y = ad.tsum(ad.power(x, 3.0))
        (gx,) = ad.grad(y, [x], create_graph=True)
        (gxx,) = ad.grad(ad.tsum(gx), [x])
    assert gx.data[0] == pytest.approx(3 * 1.5**2)
    assert gxx.data[0] == pytest.approx(6 * 1.5)


def test_errors():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NonScalarOutput):
        ad.grad(ad.mul(x, 2.0), [x])
    with pytest.raises(NonFiniteValue):
        ad.log(np.array([-1.0]))
    with pytest.raises(ShapeMismatch):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_no_grad_records_nothing():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 3.0)
    assert not y.requires_grad


def test_evaluation_is_pure():
    rng = np.random.default_rng(5)
    b = {"x": rng.standard_normal((4, 4))}
    f = lambda t: ad.softmax(ad.matmul(t["x"], t["x"]))
    assert np.array_equal(ad.evaluate(f, b), ad.evaluate(f, b))


@pytest.mark.parametrize("seed", range(3))
def test_every_primitive_matches_finite_differences(seed):
    for result in gc.check_primitives(seed):
        assert result.passed, (result.name, result.max_rel_error)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_weighted_sum_gradient_is_the_weights(weights):
    w = np.array(weights)
    _, g = ad.value_and_grad(lambda t: ad.tsum(ad.mul(t["x"], w)), {"x": np.zeros(len(w))})
    np.testing.assert_array_equal(g["x"], w)
