"""Alrao model: a pre-classifier with per-feature random learning rates and
several classifier clones, each with its own learning rate, combined by
online model averaging."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngs
from .averaging import (
    DEFAULT_THETA,
    LOGLIK_FLOOR,
    BmaState,
    SwitchState,
    averaging_init,
    averaging_update,
    classifier_log_likelihood,
)
from .features import (
    FeaturePartition,
    LrAssignment,
    LrInterval,
    classifier_lr_grid,
    partition_features,
    sample_feature_lrs,
)
from .nn import (
    TRAIN,
    Activation,
    BatchNorm1d,
    Conv2d,
    Dense,
    Flatten,
    Network,
    log_softmax,
)
from .optim import AdamState, adam_step, adam_update, sgd_step, sgd_update

CHECKPOINT_VERSION = 1


class AlraoStepError(FloatingPointError):
    """Mixture loss became non-finite; ``report`` holds the offending step."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass
class AlraoModel:
    preclassifier: Network
    classifiers: list
    classifier_lrs: list
    averaging: SwitchState | BmaState
    feature_lrs: LrAssignment
    partition: FeaturePartition
    n_classes: int
    optimizer: str = "sgd"
    pre_adam: AdamState | None = None
    classifier_adam: list | None = None
    counters: dict = field(default_factory=lambda: {
        "preclassifier_forward": 0, "preclassifier_backward": 0, "classifier_grad": 0})

    @property
    def n_cl(self):
        return len(self.classifiers)

    def posterior(self):
        return self.averaging.posterior()


@dataclass
class StepReport:
    mixture_loss: float
    per_classifier_loss: list
    posterior: np.ndarray
    grad_norms: dict


@dataclass
class CollapseReport:
    flagged: list

    def __bool__(self):
        return bool(self.flagged)


def build_alrao(preclassifier, n_cl, n_classes, interval, seed, averaging="switch",
                theta=DEFAULT_THETA, optimizer="sgd"):
    """Wrap ``preclassifier`` with ``n_cl`` independently initialized classifier clones.

    Feature learning rates come from the ``"features"`` stream of ``seed`` and
    clone j is initialized from the ``("classifier", j)`` stream, so a plain
    network built with the clone-0 stream has the same classifier init.
    """
    iv = LrInterval.of(interval)
    if optimizer not in ("sgd", "adam"):
        raise ValueError(f"optimizer must be 'sgd' or 'adam', got {optimizer!r}")
    d = preclassifier.output_dim
    if len(preclassifier.output_shape) != 1:
        raise ValueError(f"pre-classifier must output a flat vector, got {preclassifier.output_shape}")
    classifiers = [Dense(d, n_classes, rng=rngs.stream(seed, "classifier", j)) for j in range(n_cl)]
    partition = partition_features(preclassifier)
    feature_lrs = sample_feature_lrs(partition, iv, rngs.stream(seed, "features"))
    model = AlraoModel(
        preclassifier=preclassifier,
        classifiers=classifiers,
        classifier_lrs=classifier_lr_grid(n_cl, iv),
        averaging=averaging_init(averaging, n_cl, theta),
        feature_lrs=feature_lrs,
        partition=partition,
        n_classes=int(n_classes),
        optimizer=optimizer,
    )
    if optimizer == "adam":
        model.pre_adam = AdamState()
        model.classifier_adam = [AdamState() for _ in range(n_cl)]
    return model


def _classifier_log_probs(model, z):
    """Per-clone log-probabilities; clones with non-finite output predict uniformly."""
    out, healthy = [], []
    uniform = np.full((len(z), model.n_classes), -np.log(model.n_classes))
    for c in model.classifiers:
        with np.errstate(invalid="ignore", over="ignore"):
            lp = log_softmax(z @ c.params["weight"].T + c.params["bias"])
        ok = bool(np.all(np.isfinite(lp)))
        out.append(lp if ok else uniform)
        healthy.append(ok)
    return out, healthy


def alrao_predict(model, x, mode="eval"):
    z, _ = model.preclassifier.forward(x, mode)
    log_probs, _ = _classifier_log_probs(model, z)
    a = model.averaging.posterior()
    return sum(aj * np.exp(lp) for aj, lp in zip(a, log_probs))


def mixture_loss_and_grad(model, z, y):
    """Loss of the averaged classifier (weights a_j held constant) and its gradient w.r.t. ``z``."""
    y = np.asarray(y)
    rows = np.arange(len(y))
    log_probs, healthy = _classifier_log_probs(model, z)
    with np.errstate(divide="ignore"):
        log_a = np.log(model.averaging.posterior())
    picked = np.stack([lp[rows, y] for lp in log_probs]) + log_a[:, None]  # n_cl x B
    mx = picked.max(axis=0)
    mix_log = mx + np.log(np.exp(picked - mx).sum(axis=0))
    loss = float(-mix_log.mean())
    dz = np.zeros_like(z)
    for j, c in enumerate(model.classifiers):
        if not healthy[j]:
            continue
        resp = np.exp(picked[j] - mix_log)
        g = np.exp(log_probs[j])
        g[rows, y] -= 1.0
        dz += ((resp[:, None] * g) / len(y)) @ c.params["weight"]
    return loss, dz, log_probs, healthy


def alrao_step(model, x, y):
    """One training step on a minibatch.

    Order: pre-classifier forward, mixture loss and one backward pass,
    per-feature update of the pre-classifier, each clone updated on its own
    loss at the stored pre-classifier output, then the averaging weights from
    the clones' pre-update likelihoods.
    """
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty batch")
    rows = np.arange(len(y))
    z, cache = model.preclassifier.forward(x, TRAIN)
    model.counters["preclassifier_forward"] += 1
    if not np.all(np.isfinite(z)):
        # the clone fallback covers diverged classifiers, not a diverged pre-classifier
        report = StepReport(float("nan"), [float("nan")] * model.n_cl, model.averaging.posterior(), {})
        raise AlraoStepError("non-finite pre-classifier output", report)
    loss, dz, log_probs, healthy = mixture_loss_and_grad(model, z, y)
    per_loss = [float(-lp[rows, y].mean()) if ok else float("inf")
                for lp, ok in zip(log_probs, healthy)]
    if not np.isfinite(loss):
        report = StepReport(loss, per_loss, model.averaging.posterior(), {})
        raise AlraoStepError(f"non-finite mixture loss {loss}", report)

    grads, _ = model.preclassifier.backward(cache, dz)
    model.counters["preclassifier_backward"] += 1
    pre_norm = float(np.sqrt(sum(np.sum(g * g) for layer in grads if layer for g in layer.values())))
    if model.optimizer == "adam":
        adam_step(model.pre_adam, model.preclassifier, grads, model.partition, model.feature_lrs)
    else:
        sgd_step(model.preclassifier, grads, model.partition, model.feature_lrs)

    cl_norms = []
    for j, c in enumerate(model.classifiers):
        if not healthy[j]:
            cl_norms.append(float("nan"))
            continue
        g = np.exp(log_probs[j])
        g[rows, y] -= 1.0
        g /= len(y)
        cgrads = {"weight": g.T @ z, "bias": g.sum(axis=0)}
        model.counters["classifier_grad"] += 1
        cl_norms.append(float(np.sqrt(sum(np.sum(v * v) for v in cgrads.values()))))
        if model.optimizer == "adam":
            adam_update(model.classifier_adam[j], c.params, cgrads, model.classifier_lrs[j])
        else:
            sgd_update(c.params, cgrads, model.classifier_lrs[j])

    log_lik = [classifier_log_likelihood(lp, y) if ok else LOGLIK_FLOOR * len(y)
               for lp, ok in zip(log_probs, healthy)]
    model.averaging, posterior = averaging_update(model.averaging, log_lik)
    return StepReport(loss, per_loss, posterior, {"preclassifier": pre_norm, "classifiers": cl_norms})


def collapse_check(model):
    """Indices of classifier clones holding non-finite parameters."""
    flagged = [j for j, c in enumerate(model.classifiers)
               if not all(np.all(np.isfinite(p)) for p in c.params.values())]
    return CollapseReport(flagged)


# --- checkpoints -----------------------------------------------------------

def layer_spec(layer):
    if isinstance(layer, Dense):
        return {"kind": "dense", "in": layer.in_units, "out": layer.out_units}
    if isinstance(layer, Conv2d):
        return {"kind": "conv2d", "in": layer.in_channels, "out": layer.out_channels,
                "k": layer.k, "padding": layer.padding}
    if isinstance(layer, BatchNorm1d):
        return {"kind": "batchnorm1d", "n": layer.num_features, "eps": layer.eps,
                "momentum": layer.momentum}
    if isinstance(layer, Activation):
        return {"kind": "activation", "fn": layer.fn}
    if isinstance(layer, Flatten):
        return {"kind": "flatten"}
    raise TypeError(f"cannot serialize {type(layer).__name__}")


def layer_from_spec(spec):
    kind = spec["kind"]
    if kind == "dense":
        return Dense(spec["in"], spec["out"])
    if kind == "conv2d":
        return Conv2d(spec["in"], spec["out"], spec["k"], spec["padding"])
    if kind == "batchnorm1d":
        return BatchNorm1d(spec["n"], spec["eps"], spec["momentum"])
    if kind == "activation":
        return Activation(spec["fn"])
    if kind == "flatten":
        return Flatten()
    raise ValueError(f"unknown layer kind {kind!r}")


def _adam_arrays(prefix, state, arrays):
    for key in state.m:
        name = key if isinstance(key, str) else f"{key[0]}.{key[1]}"
        arrays[f"{prefix}.m.{name}"] = state.m[key]
        arrays[f"{prefix}.v.{name}"] = state.v[key]
    return {"t": state.t, "beta1": state.beta1, "beta2": state.beta2, "epsilon": state.epsilon,
            "keys": [k if isinstance(k, str) else list(k) for k in state.m]}


def _adam_restore(prefix, meta, arrays):
    st = AdamState(meta["beta1"], meta["beta2"], meta["epsilon"], meta["t"])
    for k in meta["keys"]:
        key = k if isinstance(k, str) else (int(k[0]), k[1])
        name = key if isinstance(key, str) else f"{key[0]}.{key[1]}"
        st.m[key] = np.array(arrays[f"{prefix}.m.{name}"])
        st.v[key] = np.array(arrays[f"{prefix}.v.{name}"])
    return st


def save_checkpoint(path, model, config=None, rng_states=None):
    """Write the model and run metadata to an ``.npz`` file."""
    arrays = {f"pre.{k}": v for k, v in model.preclassifier.get_state().items()}
    for j, c in enumerate(model.classifiers):
        for name, v in c.params.items():
            arrays[f"cl.{j}.{name}"] = v
    arrays["feature_lrs"] = model.feature_lrs.lrs
    arrays["partition"] = np.array([[g.layer, g.feature_index] for g in model.partition.groups],
                                   dtype=np.int64).reshape(-1, 2)
    if isinstance(model.averaging, SwitchState):
        avg = {"method": "switch", "theta": model.averaging.theta, "t": model.averaging.t}
        arrays["avg.log_wa"] = model.averaging.log_wa
        arrays["avg.log_wb"] = model.averaging.log_wb
    else:
        avg = {"method": "bma"}
        arrays["avg.log_w"] = model.averaging.log_w
    meta = {
        "version": CHECKPOINT_VERSION,
        "input_shape": list(model.preclassifier.input_shape),
        "layers": [layer_spec(layer) for layer in model.preclassifier.layers],
        "n_classes": model.n_classes,
        "classifier_lrs": list(model.classifier_lrs),
        "optimizer": model.optimizer,
        "averaging": avg,
        "counters": model.counters,
        "config": config,
        "rng_states": rng_states,
    }
    if model.optimizer == "adam":
        meta["pre_adam"] = _adam_arrays("adam.pre", model.pre_adam, arrays)
        meta["classifier_adam"] = [_adam_arrays(f"adam.cl.{j}", st, arrays)
                                   for j, st in enumerate(model.classifier_adam)]
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, config, rng_states)``."""
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode("utf-8"))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    pre = Network([layer_from_spec(s) for s in meta["layers"]], tuple(meta["input_shape"]))
    pre.set_state({k[4:]: v for k, v in arrays.items() if k.startswith("pre.")})
    d = pre.output_dim
    classifiers = []
    for j in range(len(meta["classifier_lrs"])):
        c = Dense(d, meta["n_classes"])
        c.params = {"weight": np.array(arrays[f"cl.{j}.weight"]), "bias": np.array(arrays[f"cl.{j}.bias"])}
        classifiers.append(c)
    partition = partition_features(pre)
    stored = arrays["partition"]
    if [(g.layer, g.feature_index) for g in partition.groups] != [tuple(r) for r in stored.tolist()]:
        raise ValueError("checkpoint partition does not match the rebuilt pre-classifier")
    avg = meta["averaging"]
    if avg["method"] == "switch":
        averaging = SwitchState(np.array(arrays["avg.log_wa"]), np.array(arrays["avg.log_wb"]),
                                avg["theta"], avg["t"], len(classifiers))
    else:
        averaging = BmaState(np.array(arrays["avg.log_w"]))
    model = AlraoModel(pre, classifiers, meta["classifier_lrs"], averaging,
                       LrAssignment(arrays["feature_lrs"]), partition, meta["n_classes"],
                       meta["optimizer"], counters=meta["counters"])
    if model.optimizer == "adam":
        model.pre_adam = _adam_restore("adam.pre", meta["pre_adam"], arrays)
        model.classifier_adam = [_adam_restore(f"adam.cl.{j}", m, arrays)
                                 for j, m in enumerate(meta["classifier_adam"])]
    return model, meta["config"], meta["rng_states"]
