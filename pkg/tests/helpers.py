"""Shared test utilities: random networks and a gradient checker."""

import numpy as np

from alrao.nn import TRAIN, Activation, BatchNorm1d, Conv2d, Dense, Flatten, Network


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def layer_case(kind, rng):
    """A small network whose only (or main) layer is ``kind``, plus a matching input batch."""
    b = int(rng.integers(2, 5))
    if kind == "dense":
        i, o = rng.integers(1, 6, size=2)
        return Network([Dense(i, o, rng=rng)], (i,)), rng.normal(size=(b, i))
    if kind in ("conv-valid", "conv-same"):
        c, o = rng.integers(1, 3, size=2)
        k = int(rng.choice([1, 3]))
        h, w = rng.integers(k, k + 3, size=2)
        pad = "valid" if kind == "conv-valid" else "same"
        net = Network([Conv2d(c, o, k, pad, rng=rng)], (c, h, w))
        return net, rng.normal(size=(b, c, h, w))
    if kind == "batchnorm":
        n = int(rng.integers(1, 5))
        bn = BatchNorm1d(n)
        bn.params["gain"] = rng.normal(size=n)
        bn.params["bias"] = rng.normal(size=n)
        return Network([Dense(3, n, rng=rng), bn], (3,)), rng.normal(size=(b, 3))
    if kind in ("tanh", "sigmoid", "relu"):
        x = rng.normal(size=(b, 4))
        if kind == "relu":
            # keep inputs away from the kink so central differences are exact
            x = np.where(np.abs(x) < 0.1, x + np.sign(x + 1e-12) * 0.2, x)
        return Network([Activation(kind)], (4,)), x
    if kind == "flatten":
        return Network([Flatten(), Dense(6, 2, rng=rng)], (1, 2, 3)), rng.normal(size=(b, 1, 2, 3))
    raise ValueError(kind)


LAYER_KINDS = ("dense", "conv-valid", "conv-same", "batchnorm", "tanh", "sigmoid", "relu", "flatten")


def check_network_gradients(net, x, rng, h=1e-6):
    """Relative error between backprop and central differences for L = sum(out * R).

    Measured on the concatenation of every parameter gradient and the input
    gradient, so an exactly-zero block (e.g. a bias feeding BatchNorm) is
    judged against the whole gradient's scale rather than its own.
    """
    out, cache = net.forward(x, TRAIN)
    r = rng.normal(size=out.shape)
    grads, dx = net.backward(cache, r)

    def f():
        return float(np.sum(net.forward(x, TRAIN)[0] * r))

    analytic, numeric = [dx.ravel()], [_fd(f, [x], h)[0].ravel()]
    for i, layer in enumerate(net.layers):
        names = list(layer.params)
        analytic += [grads[i][n].ravel() for n in names]
        numeric += [g.ravel() for g in _fd(f, [layer.params[n] for n in names], h)]
    return rel_error(np.concatenate(analytic), np.concatenate(numeric))


def _fd(f, arrays, h):
    from alrao.nn import finite_diff_gradient
    return finite_diff_gradient(f, arrays, h)
