"""Small dense/convolutional network engine with hand-written backprop.

Tensors are float64 numpy arrays; the leading axis is always the batch.
Every layer exposes ``forward(x, train) -> (y, cache)`` and
``backward(cache, dy) -> (grads, dx)``, where ``grads`` is a dict keyed like
``layer.params``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import kernels

TRAIN = "train"
EVAL = "eval"


class ShapeError(ValueError):
    """Input shape does not match what a layer expects."""

    def __init__(self, message, layer_index=None):
        self.layer_index = layer_index
        where = f"layer {layer_index}: " if layer_index is not None else ""
        super().__init__(where + message)


class CacheMismatchError(ValueError):
    pass


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, train):
        raise NotImplementedError

    def backward(self, cache, dy):
        raise NotImplementedError

    def __repr__(self):
        shapes = ", ".join(f"{k}={v.shape}" for k, v in self.params.items())
        return f"{type(self).__name__}({shapes})"


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_units, out_units, rng=None):
        super().__init__()
        self.in_units, self.out_units = int(in_units), int(out_units)
        if rng is None:
            w = np.zeros((self.out_units, self.in_units))
            b = np.zeros(self.out_units)
        else:
            w = _uniform_init(rng, (self.out_units, self.in_units), self.in_units)
            b = _uniform_init(rng, (self.out_units,), self.in_units)
        self.params = {"weight": w, "bias": b}

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_units:
            raise ShapeError(f"dense expects ({self.in_units},) per sample, got {tuple(in_shape)}")
        return (self.out_units,)

    def forward(self, x, train):
        if x.ndim != 2 or x.shape[1] != self.in_units:
            raise ShapeError(f"dense expects (batch, {self.in_units}), got {x.shape}")
        return x @ self.params["weight"].T + self.params["bias"], x

    def backward(self, cache, dy):
        x = cache
        grads = {"weight": dy.T @ x, "bias": dy.sum(axis=0)}
        return grads, dy @ self.params["weight"]


class Conv2d(Layer):
    """Stride-1 2-D convolution (cross-correlation) with 'valid' or 'same' padding."""

    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, padding="valid", rng=None):
        super().__init__()
        if padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")
        k = int(kernel_size)
        if padding == "same" and k % 2 == 0:
            raise ValueError("'same' padding needs an odd kernel size")
        self.in_channels, self.out_channels, self.k = int(in_channels), int(out_channels), k
        self.padding = padding
        self.pad = (k - 1) // 2 if padding == "same" else 0
        shape = (self.out_channels, self.in_channels, k, k)
        fan_in = self.in_channels * k * k
        if rng is None:
            w, b = np.zeros(shape), np.zeros(self.out_channels)
        else:
            w = _uniform_init(rng, shape, fan_in)
            b = _uniform_init(rng, (self.out_channels,), fan_in)
        self.params = {"weight": w, "bias": b}

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ShapeError(f"conv2d expects ({self.in_channels}, H, W) per sample, got {tuple(in_shape)}")
        _, h, w = in_shape
        oh, ow = h + 2 * self.pad - self.k + 1, w + 2 * self.pad - self.k + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"input {h}x{w} smaller than kernel {self.k}")
        return (self.out_channels, oh, ow)

    def forward(self, x, train):
        if x.ndim != 4:
            raise ShapeError(f"conv2d expects (batch, C, H, W), got {x.shape}")
        _, oh, ow = self.out_shape(x.shape[1:])
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else np.ascontiguousarray(x)
        cols = kernels.im2col(xp, self.k, self.k)
        wmat = self.params["weight"].reshape(self.out_channels, -1)
        out = cols @ wmat.T + self.params["bias"]
        y = out.reshape(x.shape[0], oh, ow, self.out_channels).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (cols, xp.shape)

    def backward(self, cache, dy):
        cols, xp_shape = cache
        dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        w = self.params["weight"]
        grads = {"weight": (dy2.T @ cols).reshape(w.shape), "bias": dy2.sum(axis=0)}
        dcols = np.ascontiguousarray(dy2 @ w.reshape(self.out_channels, -1))
        dxp = kernels.col2im(dcols, tuple(xp_shape), self.k, self.k)
        p = self.pad
        dx = dxp[:, :, p:xp_shape[2] - p, p:xp_shape[3] - p] if p else dxp
        return grads, dx


class BatchNorm1d(Layer):
    kind = "batchnorm1d"

    def __init__(self, num_features, eps=1e-5, momentum=0.1):
        super().__init__()
        self.num_features = int(num_features)
        self.eps, self.momentum = eps, momentum
        self.params = {"gain": np.ones(self.num_features), "bias": np.zeros(self.num_features)}
        self.running_mean = np.zeros(self.num_features)
        self.running_var = np.ones(self.num_features)

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.num_features:
            raise ShapeError(f"batchnorm1d expects ({self.num_features},) per sample, got {tuple(in_shape)}")
        return tuple(in_shape)

    def forward(self, x, train):
        if x.ndim != 2 or x.shape[1] != self.num_features:
            raise ShapeError(f"batchnorm1d expects (batch, {self.num_features}), got {x.shape}")
        if train:
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            n = x.shape[0]
            m = self.momentum
            unbiased = var * n / (n - 1) if n > 1 else var
            self.running_mean = (1 - m) * self.running_mean + m * mu
            self.running_var = (1 - m) * self.running_var + m * unbiased
        else:
            mu, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        y = self.params["gain"] * xhat + self.params["bias"]
        return y, (xhat, inv_std, train)

    def backward(self, cache, dy):
        xhat, inv_std, train = cache
        grads = {"gain": (dy * xhat).sum(axis=0), "bias": dy.sum(axis=0)}
        dxhat = dy * self.params["gain"]
        if not train:
            return grads, dxhat * inv_std
        n = dy.shape[0]
        dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return grads, dx


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class Activation(Layer):
    kind = "activation"
    FUNCTIONS = ("tanh", "relu", "sigmoid")

    def __init__(self, fn):
        super().__init__()
        if fn not in self.FUNCTIONS:
            raise ValueError(f"unknown activation {fn!r}")
        self.fn = fn

    def forward(self, x, train):
        if self.fn == "tanh":
            y = np.tanh(x)
            return y, y
        if self.fn == "relu":
            return np.maximum(x, 0.0), x > 0
        y = _sigmoid(x)
        return y, y

    def backward(self, cache, dy):
        if self.fn == "tanh":
            return {}, dy * (1.0 - cache * cache)
        if self.fn == "relu":
            return {}, dy * cache
        return {}, dy * cache * (1.0 - cache)

    def __repr__(self):
        return f"Activation({self.fn})"


class Flatten(Layer):
    """Reshape (batch, ...) to (batch, -1); bridges conv blocks to dense layers."""

    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dy):
        return {}, dy.reshape(cache)


@dataclass
class ForwardCache:
    mode: str
    entries: list
    n_layers: int


class Network:
    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ShapeError as e:
                raise ShapeError(str(e), layer_index=i) from None
        self.output_shape = shape

    @property
    def output_dim(self):
        return int(np.prod(self.output_shape))

    def parameters(self):
        """Yield (layer_index, name, array) for every parameter tensor."""
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                yield i, name, arr

    def n_parameters(self):
        return sum(arr.size for _, _, arr in self.parameters())

    def forward(self, x, mode=TRAIN):
        if mode not in (TRAIN, EVAL):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"network expects input {self.input_shape} per sample, got {x.shape[1:]}",
                             layer_index=0)
        train = mode == TRAIN
        entries = []
        for i, layer in enumerate(self.layers):
            try:
                x, c = layer.forward(x, train)
            except ShapeError as e:
                raise ShapeError(str(e), layer_index=i) from None
            entries.append(c)
        return x, ForwardCache(mode, entries, len(self.layers))

    def backward(self, cache, dout):
        if not isinstance(cache, ForwardCache) or cache.n_layers != len(self.layers):
            raise CacheMismatchError("cache was not produced by this network's forward")
        if cache.mode != TRAIN:
            raise CacheMismatchError("backward needs a cache from a train-mode forward")
        grads = [None] * len(self.layers)
        d = np.asarray(dout, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            grads[i], d = self.layers[i].backward(cache.entries[i], d)
        return grads, d

    def copy(self):
        return copy.deepcopy(self)

    def get_state(self):
        """Flat dict of every array needed to restore this network."""
        state = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                state[f"{i}.{name}"] = arr.copy()
            if isinstance(layer, BatchNorm1d):
                state[f"{i}.running_mean"] = layer.running_mean.copy()
                state[f"{i}.running_var"] = layer.running_var.copy()
        return state

    def set_state(self, state):
        for i, layer in enumerate(self.layers):
            for name in layer.params:
                layer.params[name] = np.array(state[f"{i}.{name}"], dtype=np.float64)
            if isinstance(layer, BatchNorm1d):
                layer.running_mean = np.array(state[f"{i}.running_mean"], dtype=np.float64)
                layer.running_var = np.array(state[f"{i}.running_var"], dtype=np.float64)

    def __repr__(self):
        return f"Network(input={self.input_shape}, layers={self.layers!r})"


def forward(net, x, mode=TRAIN):
    return net.forward(x, mode)


def backward(net, cache, dout):
    return net.backward(cache, dout)


def log_softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def softmax(logits):
    z = np.exp(logits - np.max(logits, axis=-1, keepdims=True))
    return z / np.sum(z, axis=-1, keepdims=True)


def softmax_cross_entropy(logits, y):
    """Mean cross-entropy (nats) over the batch and its gradient w.r.t. ``logits``.

    ``logits`` may be a single vector of K scores with an integer ``y``, or a
    (batch, K) array with a vector of labels.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    if single:
        logits, y = logits[None, :], np.array([y])
    y = np.asarray(y)
    k = logits.shape[-1]
    if k < 2:
        raise ValueError("need at least two classes")
    if y.shape != (logits.shape[0],):
        raise ValueError(f"labels shape {y.shape} does not match batch {logits.shape[0]}")
    if np.any((y < 0) | (y >= k)):
        raise ValueError(f"class index out of range 0..{k - 1}")
    rows = np.arange(len(y))
    logp = log_softmax(logits)
    loss = -logp[rows, y].mean()
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad /= len(y)
    if single:
        return loss, grad[0]
    return loss, grad


def finite_diff_gradient(f, params, h=1e-5):
    """Central-difference gradient of scalar ``f()`` w.r.t. arrays in ``params``.

    ``params`` is a list of arrays that ``f`` reads; they are perturbed in
    place and restored afterwards.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    out = []
    for p in params:
        g = np.zeros_like(p, dtype=np.float64)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        if not np.shares_memory(flat, p):
            raise ValueError("parameter arrays must be contiguous")
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"f is not finite near coordinate {i}")
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out
