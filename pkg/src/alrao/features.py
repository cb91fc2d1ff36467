"""Feature partitioning and learning-rate assignment.

A feature is one output unit of a layer together with all of its incoming
parameters (bias included). Every pre-classifier feature gets its own
learning rate drawn log-uniformly from ``[eta_min, eta_max]`` once, at
construction; classifier clones get a deterministic log-spaced grid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .nn import Activation, BatchNorm1d, Conv2d, Dense, Flatten


@dataclass(frozen=True)
class LrInterval:
    eta_min: float
    eta_max: float

    def __post_init__(self):
        if not (self.eta_min > 0):
            raise ValueError(f"eta_min must be > 0, got {self.eta_min}")
        if self.eta_max < self.eta_min:
            raise ValueError(f"eta_max ({self.eta_max}) < eta_min ({self.eta_min})")

    @classmethod
    def of(cls, interval):
        if isinstance(interval, cls):
            return interval
        lo, hi = interval
        return cls(float(lo), float(hi))


@dataclass(frozen=True)
class FeatureGroup:
    layer: int
    feature_index: int
    param_names: tuple
    size: int


@dataclass
class FeaturePartition:
    groups: list
    # layer index -> (first group id, number of groups); groups of a layer are contiguous
    layer_spans: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.groups)

    def n_coordinates(self):
        return sum(g.size for g in self.groups)

    def coordinates(self, net):
        """Set of (layer, param name, flat index) touched by the groups."""
        coords = set()
        for g in self.groups:
            layer = net.layers[g.layer]
            for name in g.param_names:
                arr = layer.params[name]
                idx = np.arange(arr.size).reshape(arr.shape)[g.feature_index].ravel()
                coords.update((g.layer, name, int(i)) for i in idx)
        return coords


@dataclass
class LrAssignment:
    lrs: np.ndarray

    def __post_init__(self):
        self.lrs = np.asarray(self.lrs, dtype=np.float64).reshape(-1)
        if np.any(self.lrs < 0) or not np.all(np.isfinite(self.lrs)):
            raise ValueError("learning rates must be finite and non-negative")

    def __len__(self):
        return len(self.lrs)

    def layer_rates(self, partition, layer):
        start, count = partition.layer_spans[layer]
        return self.lrs[start:start + count]

    def check_aligned(self, partition):
        if len(self.lrs) != len(partition.groups):
            raise ValueError(f"assignment has {len(self.lrs)} rates for {len(partition.groups)} groups")

    @classmethod
    def uniform(cls, partition, lr):
        return cls(np.full(len(partition), float(lr)))


def log_uniform_sample(rng, interval):
    iv = LrInterval.of(interval)
    if iv.eta_min == iv.eta_max:
        return iv.eta_min
    lo, hi = np.log(iv.eta_min), np.log(iv.eta_max)
    return float(np.clip(np.exp(rng.uniform(lo, hi)), iv.eta_min, iv.eta_max))


def partition_features(net):
    groups, spans = [], {}
    for li, layer in enumerate(net.layers):
        if isinstance(layer, (Dense, Conv2d, BatchNorm1d)):
            names = tuple(layer.params)
            n_feat = layer.params[names[0]].shape[0]
            per_feature = sum(arr[0].size for arr in layer.params.values())
            spans[li] = (len(groups), n_feat)
            groups.extend(FeatureGroup(li, i, names, per_feature) for i in range(n_feat))
        elif not isinstance(layer, (Activation, Flatten)):
            raise TypeError(f"unsupported layer kind {type(layer).__name__} at index {li}")
    return FeaturePartition(groups, spans)


def sample_feature_lrs(partition, interval, rng):
    """One independent log-uniform draw per group, in group order."""
    iv = LrInterval.of(interval)
    n = len(partition)
    if iv.eta_min == iv.eta_max:
        return LrAssignment(np.full(n, iv.eta_min))
    # vectorized draw consumes the stream exactly like n scalar log_uniform_sample calls
    u = rng.uniform(np.log(iv.eta_min), np.log(iv.eta_max), size=n)
    return LrAssignment(np.clip(np.exp(u), iv.eta_min, iv.eta_max))


def classifier_lr_grid(n_cl, interval):
    iv = LrInterval.of(interval)
    n_cl = int(n_cl)
    if n_cl < 1:
        raise ValueError("need at least one classifier")
    if n_cl == 1:
        return [float(np.exp(0.5 * (np.log(iv.eta_min) + np.log(iv.eta_max))))]
    span = np.log(iv.eta_max / iv.eta_min)
    grid = [float(np.exp(np.log(iv.eta_min) + j / (n_cl - 1) * span)) for j in range(n_cl)]
    grid[0], grid[-1] = iv.eta_min, iv.eta_max
    return grid


LRS_COLUMNS = ("group_id", "layer", "feature_index", "lr")


def write_lrs_csv(path, partition, assignment):
    assignment.check_aligned(partition)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LRS_COLUMNS)
        for gid, (g, lr) in enumerate(zip(partition.groups, assignment.lrs)):
            w.writerow([gid, g.layer, g.feature_index, repr(float(lr))])


def read_lrs_csv(path, partition=None):
    """Read an ``lrs.csv`` back into an LrAssignment, checking it against ``partition`` if given."""
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    rows.sort(key=lambda r: int(r["group_id"]))
    if partition is not None:
        if len(rows) != len(partition):
            raise ValueError(f"lrs file has {len(rows)} groups, partition has {len(partition)}")
        for r, g in zip(rows, partition.groups):
            if (int(r["layer"]), int(r["feature_index"])) != (g.layer, g.feature_index):
                raise ValueError(f"group {r['group_id']} does not match the partition")
    return LrAssignment([float(r["lr"]) for r in rows])
