import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from gpp.errors import DomainError, NumericError, ShapeError
from gpp.nn import (AdamState, DenseNet, Layer, adam_step, backward, classifier_loss,
                    cross_entropy, finite_difference_grad, forward, init_dense_net, softmax)


def _loop_forward(net, x):
    """Straight-loop forward used as an oracle."""
    a = [list(row) for row in x]
    for layer in net.layers:
        W, b = layer.weight, layer.bias
        out = []
        for row in a:
            pre = [sum(row[i] * W[i, j] for i in range(W.shape[0])) + b[j]
                   for j in range(W.shape[1])]
            if layer.activation == "relu":
                pre = [max(v, 0.0) for v in pre]
            elif layer.activation == "softmax":
                m = max(pre)
                e = [math.exp(v - m) for v in pre]
                pre = [v / sum(e) for v in e]
            out.append(pre)
        a = out
    return np.array(a)


def test_zero_identity_net_gives_zero_output(rng):
    net = DenseNet([Layer(np.zeros((3, 2)), np.zeros(2), "identity")])
    assert np.all(forward(net, rng.standard_normal((5, 3))) == 0.0)


def test_single_relu_layer_identity_weights():
    net = DenseNet([Layer(np.eye(2), np.zeros(2), "relu")])
    np.testing.assert_array_equal(forward(net, np.array([[-1.0, 2.0]])), [[0.0, 2.0]])


def test_forward_matches_loop_oracle(rng):
    net = init_dense_net((4, 5, 3), rng, output_activation="softmax")
    for layer in net.layers:
        layer.bias[:] = rng.standard_normal(layer.bias.shape)
    x = rng.standard_normal((6, 4))
    np.testing.assert_allclose(forward(net, x), _loop_forward(net, x), rtol=0, atol=1e-12)


def test_forward_rejects_wrong_width(rng):
    net = init_dense_net((4, 3), rng)
    with pytest.raises(ShapeError):
        forward(net, np.zeros((2, 5)))


def test_mismatched_layers_rejected():
    with pytest.raises(ShapeError):
        DenseNet([Layer(np.zeros((2, 3)), np.zeros(3)), Layer(np.zeros((4, 1)), np.zeros(1))])


def test_zero_output_grad_gives_zero_grads(rng):
    net = init_dense_net((3, 4, 2), rng)
    x = rng.standard_normal((5, 3))
    grads, dx = backward(net, x, np.zeros((5, 2)))
    assert all(np.all(g == 0) for g in grads) and np.all(dx == 0)


def test_scalar_chain_rule_by_hand():
    net = DenseNet([Layer(np.array([[2.0]]), np.array([0.0]), "relu")])
    (dw, db), dx = backward(net, np.array([[3.0]]), np.array([[1.0]]))
    assert dw[0, 0] == 3.0 and db[0] == 1.0 and dx[0, 0] == 2.0


def test_cross_entropy_perfect_and_uniform():
    assert cross_entropy(np.array([[1.0, 0.0]]), [0])[0] == 0.0
    assert cross_entropy(np.array([[0.5, 0.5]]), [1])[0] == pytest.approx(math.log(2), abs=1e-15)


def test_cross_entropy_matches_loop(rng):
    p = softmax(rng.standard_normal((3, 4)))
    labels = np.array([0, 3, 2])
    expected = -sum(math.log(p[i, labels[i]]) for i in range(3)) / 3
    loss, grad = cross_entropy(p, labels)
    assert abs(loss - expected) < 1e-12
    onehot = np.eye(4)[labels]
    np.testing.assert_allclose(grad, (p - onehot) / 3, atol=1e-15)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(DomainError):
        cross_entropy(np.array([[0.5, 0.5]]), [2])


def test_cross_entropy_clamps_zero_probability():
    loss, _ = cross_entropy(np.array([[1.0, 0.0]]), [1])
    assert loss == pytest.approx(-math.log(1e-12))


def test_adam_zero_grad_is_fixed_point(rng):
    p = [rng.standard_normal((3, 2))]
    before = p[0].copy()
    st_ = AdamState.for_params(p)
    adam_step(p, [np.zeros((3, 2))], st_, 0.1)
    np.testing.assert_array_equal(p[0], before)
    assert st_.step == 1


def test_adam_first_step_moves_by_lr():
    p = [np.array([1.0])]
    adam_step(p, [np.array([1.0])], AdamState.for_params(p), 0.1)
    assert p[0][0] == pytest.approx(0.9, abs=1e-6)


def _scalar_adam(theta, g, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    return theta - lr * mhat / (math.sqrt(vhat) + eps), m, v


def test_adam_two_steps_match_scalar_reference():
    p = [np.array([0.7, -1.3])]
    grads = [np.array([0.3, -2.0]), np.array([0.3, -2.0])]
    state = AdamState.for_params(p)
    ref = [(0.7, 0.0, 0.0), (-1.3, 0.0, 0.0)]
    for t, g in enumerate(grads, start=1):
        adam_step(p, [g], state, 0.01)
        ref = [_scalar_adam(th, g[i], m, v, t, 0.01) for i, (th, m, v) in enumerate(ref)]
    np.testing.assert_allclose(p[0], [r[0] for r in ref], rtol=0, atol=1e-12)


def test_adam_non_finite_gradient_aborts_without_mutation():
    p = [np.array([1.0, 2.0])]
    state = AdamState.for_params(p)
    with pytest.raises(NumericError):
        adam_step(p, [np.array([np.nan, 0.0])], state, 0.1)
    np.testing.assert_array_equal(p[0], [1.0, 2.0])
    assert state.step == 0


def test_finite_difference_constant_and_quadratic():
    net = DenseNet([Layer(np.array([[3.0]]), np.array([0.0]), "identity")])
    x = np.array([[1.0]])
    g = finite_difference_grad(net, x, lambda out: 7.0)
    assert np.all(g[0] == 0) and np.all(g[1] == 0)
    g = finite_difference_grad(net, x, lambda out: 0.5 * float(out[0, 0]) ** 2)
    assert abs(g[0][0, 0] - 3.0) < 1e-8


def _rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    depth = 1 + seed % 3
    sizes = [int(rng.integers(2, 6)) for _ in range(depth)] + [3]
    net = init_dense_net(sizes, rng, output_activation="softmax")
    for layer in net.layers:
        layer.bias[:] = 0.1 * rng.standard_normal(layer.bias.shape)
    x = rng.standard_normal((4, sizes[0]))
    labels = rng.integers(0, 3, 4)
    _, grads, _ = classifier_loss(net, x, labels)
    fd = finite_difference_grad(net, x, lambda p: cross_entropy(p, labels)[0])
    assert max(_rel_err(a, b) for a, b in zip(grads, fd)) < 1e-4


def test_input_grad_matches_finite_differences(rng):
    net = init_dense_net((3, 4, 2), rng, output_activation="softmax")
    x = rng.standard_normal((2, 3))
    labels = np.array([0, 1])
    _, _, dx = classifier_loss(net, x, labels)
    h = 1e-6
    fd = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd[idx] = (cross_entropy(forward(net, xp), labels)[0]
                   - cross_entropy(forward(net, xm), labels)[0]) / (2 * h)
    assert _rel_err(dx, fd) < 1e-4


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(logits):
    assert np.all(np.abs(softmax(logits).sum(axis=1) - 1.0) < 1e-9)


@given(st.integers(0, 2**31 - 1))
def test_forward_is_deterministic(seed):
    rng = np.random.default_rng(seed)
    net = init_dense_net((3, 4, 2), rng)
    x = rng.standard_normal((3, 3))
    assert forward(net, x).tobytes() == forward(net, x.copy()).tobytes()


def test_glorot_limits(rng):
    net = init_dense_net((100, 50), rng)
    lim = math.sqrt(6 / 150)
    assert np.all(np.abs(net.layers[0].weight) <= lim) and np.all(net.layers[0].bias == 0)
