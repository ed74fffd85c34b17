import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idnn_asd.neuralnet import (
    Activation,
    AdamState,
    DenseLayer,
    DenseNetwork,
    VariationalHead,
    adam_step,
    backward,
    forward,
    grad_check,
    init_layer,
    kl_gaussian,
    kl_per_example,
    loss_and_grads,
    loss_mse,
    loss_mse_grad,
    predict,
    read_network,
    write_network,
)


def layer(w, b, act=Activation.NONE):
    return DenseLayer(np.array(w, dtype=float), np.array(b, dtype=float), act)


def tiny_net():
    # 2 -> 2 (ReLU) -> 1
    return DenseNetwork([layer([[1, -1], [2, 0]], [0, -1], Activation.RELU), layer([[1, 3]], [0.5])], 1)


# -- forward ------------------------------------------------------------------

def test_forward_hand_example():
    # x=(3,1): hidden pre (2, 5) -> relu (2, 5); out 2 + 15 + 0.5
    assert predict(tiny_net(), np.array([3.0, 1.0])).tolist() == [[17.5]]
    # x=(0,1): hidden pre (-1, -1) -> relu (0, 0); out = bias
    assert predict(tiny_net(), np.array([0.0, 1.0])).tolist() == [[0.5]]


def test_zero_network_outputs_zero():
    net = DenseNetwork([layer(np.zeros((3, 4)), np.zeros(3), Activation.RELU), layer(np.zeros((4, 3)), np.zeros(4))], 1)
    assert not predict(net, np.ones((5, 4))).any()


def test_identity_layer_is_identity():
    net = DenseNetwork([layer(np.eye(3), np.zeros(3))], 1)
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_allclose(predict(net, x), x)


def test_forward_rejects_wrong_width():
    with pytest.raises(ValueError):
        forward(tiny_net(), np.ones(3))


def test_layer_shape_checks():
    with pytest.raises(ValueError):
        DenseLayer(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        DenseNetwork([layer(np.zeros((2, 3)), np.zeros(2)), layer(np.zeros((1, 3)), np.zeros(1))], 1)


def test_variational_head_must_be_linear():
    with pytest.raises(ValueError):
        VariationalHead(layer(np.zeros((2, 2)), np.zeros(2), Activation.RELU), layer(np.zeros((2, 2)), np.zeros(2)))


def test_variational_sample_uses_noise():
    head = VariationalHead(layer([[1.0]], [0.0]), layer([[0.0]], [math.log(4.0)]))
    net = DenseNetwork([layer([[1.0]], [0.0])], 0, head)
    # mu = 1, sigma = 2, so z = 1 + 2 * 0.5
    assert forward(net, np.array([[1.0]]), np.array([[0.5]])).output.tolist() == [[2.0]]
    assert predict(net, np.array([[1.0]])).tolist() == [[1.0]]


# -- losses -------------------------------------------------------------------

def test_mse_is_squared_norm_per_example():
    assert loss_mse(np.array([[1.0, 2.0]]), np.zeros((1, 2))) == 5.0
    assert loss_mse(np.array([[1.0], [3.0]]), np.zeros((2, 1))) == 5.0


def test_mse_grad_hand_case():
    np.testing.assert_array_equal(loss_mse_grad(np.array([[3.0, 1.0]]), np.array([[1.0, 1.0]])), [[4.0, 0.0]])


def test_kl_zero_at_prior():
    assert kl_gaussian(np.zeros((2, 3)), np.zeros((2, 3))) == 0.0


def test_kl_hand_values():
    # mu = 1, var = 1: 0.5 * 1
    assert kl_per_example(np.array([[1.0]]), np.array([[0.0]])).tolist() == [0.5]
    # mu = 0, var = e: 0.5 * (e - 1 - 1)
    assert kl_per_example(np.array([[0.0]]), np.array([[1.0]]))[0] == pytest.approx(0.5 * (math.e - 2))


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.floats(-20, 20), st.floats(-10, 10)), min_size=1, max_size=8))
def test_kl_is_non_negative(pairs):
    mu, logvar = np.array(pairs).T
    assert kl_per_example(mu[None], logvar[None])[0] >= 0


# -- backprop -----------------------------------------------------------------

def test_single_linear_layer_gradient():
    # L = ||Wx + b - t||^2, dL/dW = 2 (y - t) x^T
    net = DenseNetwork([layer([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])], 1)
    x, t = np.array([[2.0, 3.0]]), np.array([[1.0, 1.0]])
    _, _, (dw, db) = loss_and_grads(net, x, t)
    np.testing.assert_array_equal(dw, [[4.0, 6.0], [8.0, 12.0]])
    np.testing.assert_array_equal(db, [2.0, 4.0])


def test_dead_relu_blocks_gradient():
    net = tiny_net()
    _, _, grads = loss_and_grads(net, np.array([[0.0, 1.0]]), np.array([[0.0]]))
    assert not grads[0].any() and not grads[1].any()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.booleans())
def test_backprop_matches_finite_differences(seed, variational):
    rng = np.random.default_rng(seed)
    enc = [init_layer(rng, 4, 3, Activation.NONE, np.float64)]
    head = None
    if variational:
        head = VariationalHead(init_layer(rng, 3, 2, dtype=np.float64), init_layer(rng, 3, 2, dtype=np.float64))
    else:
        enc.append(init_layer(rng, 3, 2, dtype=np.float64))
    net = DenseNetwork(enc + [init_layer(rng, 2, 4, dtype=np.float64)], len(enc), head)
    x = rng.normal(size=(3, 4))
    noise = rng.normal(size=(3, 2)) if variational else None
    assert grad_check(net, x, rng.normal(size=(3, 4)), 0.3, noise) < 1e-6


def test_backward_rejects_foreign_trace():
    trace = forward(tiny_net(), np.ones(2))
    other = DenseNetwork([layer(np.eye(2), np.zeros(2)), layer(np.eye(2), np.zeros(2)),
                          layer([[1.0, 1.0]], [0.0])], 1)
    with pytest.raises(ValueError):
        backward(other, trace, np.ones((1, 1)))


# -- Adam ---------------------------------------------------------------------

def test_first_adam_step_moves_by_lr():
    w = np.array([1.0])
    state = AdamState.for_params([w], lr=0.1)
    assert adam_step([w], [2 * w], state)
    assert w[0] == pytest.approx(0.9, abs=1e-6)


def test_adam_minimizes_quadratic():
    w = np.array([1.0])
    state = AdamState.for_params([w], lr=0.05)
    for _ in range(200):
        adam_step([w], [2 * w], state)
    assert abs(w[0]) < 0.05


def test_zero_gradient_is_a_no_op():
    w = np.array([0.7, -0.2])
    state = AdamState.for_params([w])
    adam_step([w], [np.zeros(2)], state)
    assert w.tolist() == [0.7, -0.2]


def test_non_finite_gradient_skips_step():
    w = np.array([0.5, 0.5])
    state = AdamState.for_params([w])
    assert not adam_step([w], [np.array([np.nan, 1.0])], state)
    assert w.tolist() == [0.5, 0.5]
    assert state.step_count == 0 and not state.first_moment[0].any()


def test_adam_shape_mismatch():
    w = np.zeros(2)
    with pytest.raises(ValueError):
        adam_step([w], [np.zeros(3)], AdamState.for_params([w]))


# -- init and serialization ---------------------------------------------------

def test_glorot_bounds_and_zero_bias():
    lyr = init_layer(np.random.default_rng(0), 320, 64)
    assert np.abs(lyr.weights).max() <= math.sqrt(6 / 384)
    assert lyr.weights.dtype == np.float32 and not lyr.bias.any()


def test_init_is_deterministic():
    a = init_layer(np.random.default_rng(9), 5, 4)
    b = init_layer(np.random.default_rng(9), 5, 4)
    np.testing.assert_array_equal(a.weights, b.weights)


@pytest.mark.parametrize("variational", [False, True])
def test_network_serialization_round_trip(variational):
    rng = np.random.default_rng(1)
    relu = Activation.RELU
    head = VariationalHead(init_layer(rng, 6, 2), init_layer(rng, 6, 2)) if variational else None
    enc = [init_layer(rng, 8, 6, relu)] + ([] if variational else [init_layer(rng, 6, 2, relu)])
    net = DenseNetwork(enc + [init_layer(rng, 2, 8)], len(enc), head)
    buf = io.BytesIO()
    write_network(buf, net)
    buf.seek(0)
    back = read_network(buf)
    assert back.widths() == net.widths() and back.variational == variational
    x = rng.normal(size=(3, 8)).astype(np.float32)
    np.testing.assert_array_equal(predict(back, x), predict(net, x))
