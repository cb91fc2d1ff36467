import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alrao.nn import (EVAL, TRAIN, Activation, BatchNorm1d, CacheMismatchError, Conv2d, Dense, Flatten,
                      Network, ShapeError, finite_diff_gradient, log_softmax, softmax, softmax_cross_entropy)
from helpers import LAYER_KINDS, check_network_gradients, layer_case, rel_error


@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_layer_gradients_match_central_differences(kind):
    rng = np.random.default_rng(zlib.crc32(kind.encode()))
    worst = max(check_network_gradients(*layer_case(kind, rng), rng) for _ in range(13))
    assert worst < 1e-5


def test_stacked_conv_net_gradients():
    rng = np.random.default_rng(7)
    net = Network([Conv2d(1, 2, 3, "same", rng=rng), Activation("tanh"), Conv2d(2, 2, 3, rng=rng),
                   Activation("sigmoid"), Flatten(), Dense(8, 3, rng=rng), BatchNorm1d(3)], (1, 4, 4))
    assert check_network_gradients(net, rng.normal(size=(3, 1, 4, 4)), rng) < 1e-5


def test_dense_identity_forward():
    d = Dense(2, 2)
    d.params["weight"] = np.eye(2)
    out, _ = Network([d], (2,)).forward(np.array([[3.0, -1.0]]))
    np.testing.assert_array_equal(out, [[3.0, -1.0]])


def test_relu_forward():
    out, _ = Network([Activation("relu")], (2,)).forward(np.array([[-2.0, 5.0]]))
    np.testing.assert_array_equal(out, [[0.0, 5.0]])


def test_conv_1x1_scales():
    c = Conv2d(1, 1, 1)
    c.params["weight"][:] = 2.0
    out, _ = Network([c], (1, 3, 3)).forward(np.ones((1, 1, 3, 3)))
    np.testing.assert_array_equal(out, np.full((1, 1, 3, 3), 2.0))


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    c = Conv2d(2, 3, 3, "same", rng=rng)
    x = rng.normal(size=(2, 2, 5, 4))
    out, _ = Network([c], (2, 5, 4)).forward(x)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for n in range(2):
        for o in range(3):
            for i in range(5):
                for j in range(4):
                    ref[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * c.params["weight"][o]) + c.params["bias"][o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_dense_backward_of_sum():
    rng = np.random.default_rng(0)
    d = Dense(3, 2, rng=rng)
    net = Network([d], (3,))
    x = rng.normal(size=(1, 3))
    out, cache = net.forward(x)
    grads, _ = net.backward(cache, np.ones_like(out))
    np.testing.assert_array_equal(grads[0]["bias"], np.ones(2))
    np.testing.assert_allclose(grads[0]["weight"], np.outer(np.ones(2), x[0]))


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(1)
    net, x = layer_case("batchnorm", rng)
    out, cache = net.forward(x)
    grads, dx = net.backward(cache, np.zeros_like(out))
    assert all(np.all(g == 0) for layer in grads for g in layer.values())
    assert np.all(dx == 0)


def test_parameter_shapes():
    assert Dense(4, 3).params["weight"].shape == (3, 4)
    c = Conv2d(3, 8, 3)
    assert c.params["weight"].shape == (8, 3, 3, 3) and c.params["bias"].shape == (8,)
    bn = BatchNorm1d(5)
    assert bn.params["gain"].shape == bn.params["bias"].shape == (5,)


def test_forward_is_pure_and_deterministic():
    rng = np.random.default_rng(2)
    net = Network([Dense(4, 3, rng=rng), Activation("tanh")], (4,))
    before = net.get_state()
    x = rng.normal(size=(5, 4))
    a, _ = net.forward(x, EVAL)
    b, _ = net.forward(x, EVAL)
    np.testing.assert_array_equal(a, b)
    for k, v in net.get_state().items():
        np.testing.assert_array_equal(v, before[k])


def test_batchnorm_running_stats_only_in_train():
    bn = BatchNorm1d(2, momentum=0.5)
    net = Network([bn], (2,))
    x = np.array([[1.0, 2.0], [3.0, 6.0]])
    net.forward(x, EVAL)
    np.testing.assert_array_equal(bn.running_mean, [0, 0])
    net.forward(x, TRAIN)
    np.testing.assert_allclose(bn.running_mean, [1.0, 2.0])
    np.testing.assert_allclose(bn.running_var, [0.5 + 0.5 * 2.0, 0.5 + 0.5 * 8.0])
    out, _ = net.forward(x, TRAIN)
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-12)


def test_shape_error_names_layer():
    net = Network([Dense(3, 4), Activation("tanh"), Dense(4, 2)], (3,))
    with pytest.raises(ShapeError) as e:
        Network([Dense(3, 4), Dense(5, 2)], (3,))
    assert e.value.layer_index == 1
    with pytest.raises(ShapeError) as e:
        net.forward(np.zeros((2, 5)))
    assert e.value.layer_index == 0


def test_backward_rejects_foreign_or_eval_cache():
    a = Network([Dense(2, 2)], (2,))
    b = Network([Dense(2, 2), Activation("tanh")], (2,))
    _, cache = b.forward(np.zeros((1, 2)))
    with pytest.raises(CacheMismatchError):
        a.backward(cache, np.zeros((1, 2)))
    _, cache = a.forward(np.zeros((1, 2)), EVAL)
    with pytest.raises(CacheMismatchError):
        a.backward(cache, np.zeros((1, 2)))


def test_cross_entropy_uniform():
    loss, g = softmax_cross_entropy(np.array([0.0, 0.0]), 0)
    assert loss == pytest.approx(np.log(2), abs=1e-12)
    np.testing.assert_allclose(g, [-0.5, 0.5])


def test_cross_entropy_is_stable():
    loss, g = softmax_cross_entropy(np.array([1000.0, 0.0]), 0)
    assert np.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(g))


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros(3), 3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6))
def test_softmax_properties(logits):
    z = np.array(logits)
    p = softmax(z)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(softmax(z + 17.0), p, atol=1e-12)
    np.testing.assert_allclose(np.exp(log_softmax(z)), p, atol=1e-12)


def test_cross_entropy_gradient_by_differences():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(3, 4))
    y = np.array([0, 3, 1])
    _, g = softmax_cross_entropy(z, y)
    num = finite_diff_gradient(lambda: softmax_cross_entropy(z, y)[0], [z])[0]
    assert rel_error(g, num) < 1e-7


def test_finite_diff_quadratic_and_constant():
    theta = np.array([3.0])
    assert finite_diff_gradient(lambda: float(theta[0] ** 2), [theta], 1e-5)[0][0] == pytest.approx(6.0, abs=1e-8)
    assert finite_diff_gradient(lambda: 1.0, [theta])[0][0] == 0.0
    np.testing.assert_array_equal(theta, [3.0])


def test_finite_diff_rejects_nonfinite():
    theta = np.array([0.0])
    with pytest.raises(FloatingPointError):
        finite_diff_gradient(lambda: float("inf"), [theta])


def test_state_round_trip():
    rng = np.random.default_rng(5)
    net = Network([Dense(2, 3, rng=rng), BatchNorm1d(3)], (2,))
    net.forward(rng.normal(size=(4, 2)))
    copy = Network([Dense(2, 3), BatchNorm1d(3)], (2,))
    copy.set_state(net.get_state())
    x = rng.normal(size=(3, 2))
    np.testing.assert_array_equal(copy.forward(x, EVAL)[0], net.forward(x, EVAL)[0])


def test_batchnorm_train_output_is_standardized():
    rng = np.random.default_rng(8)
    net = Network([BatchNorm1d(4)], (4,))
    out, _ = net.forward(rng.normal(5, 3, size=(64, 4)), TRAIN)
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=0), 1, atol=1e-4)
