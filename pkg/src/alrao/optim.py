"""Per-feature SGD and Adam updates, and random feature freezing.

Updates mutate parameter arrays in place. A learning rate of 0 leaves a
feature untouched under both optimizers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import LrAssignment


def _broadcast(rates, arr):
    return np.reshape(rates, (-1,) + (1,) * (arr.ndim - 1))


def _net_slots(net, grads, partition, assignment):
    assignment.check_aligned(partition)
    for li, _ in sorted(partition.layer_spans.items()):
        rates = assignment.layer_rates(partition, li)
        layer = net.layers[li]
        for name, p in layer.params.items():
            yield (li, name), p, grads[li][name], _broadcast(rates, p)


def sgd_update(params, grads, lr):
    """Plain SGD on a dict of arrays with one scalar (or broadcastable) rate."""
    for name, p in params.items():
        p -= lr * grads[name]


def sgd_step(net, grads, partition, assignment):
    """theta_{l,i} <- theta_{l,i} - eta_{l,i} * g_{l,i}, one rate per feature group."""
    for _, p, g, rate in _net_slots(net, grads, partition, assignment):
        p -= rate * g
    return net


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def _moments(self, key, like):
        if key not in self.m:
            self.m[key] = np.zeros_like(like)
            self.v[key] = np.zeros_like(like)
        return self.m[key], self.v[key]


def _adam_apply(state, slots):
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for key, p, g, rate in slots:
        m, v = state._moments(key, p)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(v))):
            raise FloatingPointError(f"non-finite Adam moments for {key}")
        p -= rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return state


def adam_update(state, params, grads, lr):
    """Adam on a dict of arrays sharing one step size."""
    return _adam_apply(state, ((name, p, grads[name], lr) for name, p in params.items()))


def adam_step(state, net, grads, partition, assignment):
    """Bias-corrected Adam; moments are per parameter, the step size per feature group."""
    return _adam_apply(state, list(_net_slots(net, grads, partition, assignment)))


def freeze_mask(assignment, p, eta0, rng):
    """Each group independently trains at ``eta0`` with probability ``p``, else is frozen (rate 0)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    keep = rng.random(len(assignment)) < p
    return LrAssignment(np.where(keep, float(eta0), 0.0))
