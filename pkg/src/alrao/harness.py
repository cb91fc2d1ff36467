"""Experiment runners: single runs with early stopping, SGD grids, Alrao
interval sweeps, frozen-feature curves and the convex convergence check."""

from __future__ import annotations

import copy
import csv
import logging
import os
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import rng as rngs
from .config import ConfigError, TrainConfig
from .datasets import gen_blobs, load_idx, mean_pool, minibatches, normalize_channels, split
from .engine import AlraoStepError, alrao_step, build_alrao
from .features import LrAssignment, partition_features
from .nn import EVAL, TRAIN, Activation, BatchNorm1d, Conv2d, Dense, Flatten, Network, log_softmax, \
    softmax_cross_entropy
from .optim import AdamState, adam_step, freeze_mask, sgd_step

log = logging.getLogger(__name__)

DEFAULT_SGD_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0)
EVAL_CHUNK = 512


# --- building blocks -------------------------------------------------------

def _parse_kv(text):
    out = {}
    for part in filter(None, text.split(",")):
        if "=" not in part:
            raise ConfigError(f"expected key=value in dataset spec, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_dataset(spec, seed):
    kind, _, rest = spec.partition(":")
    opts = _parse_kv(rest)
    if kind == "blobs":
        return gen_blobs(int(opts.get("k", 3)), int(opts.get("d", 20)), int(opts.get("n", 2000)),
                         float(opts.get("spread", 0.5)), int(opts.get("seed", seed)))
    if kind == "digits":
        base = resources.files("alrao") / "data"
        ds = load_idx(str(base / "digits2000-images-idx3-ubyte.gz"),
                      str(base / "digits2000-labels-idx1-ubyte.gz"), name="digits")
        return _finish_images(ds, opts)
    if kind == "idx":
        try:
            ds = load_idx(opts["images"], opts["labels"], int(opts.get("k", 10)))
        except KeyError as e:
            raise ConfigError(f"idx dataset needs {e.args[0]}=PATH") from None
        return _finish_images(ds, opts)
    raise ConfigError(f"unknown dataset kind {kind!r}")


def _finish_images(ds, opts):
    n = int(opts.get("n", len(ds)))
    ds = ds.subset(np.arange(n)) if n < len(ds) else ds
    return mean_pool(ds, int(opts.get("pool", 1)))


def build_preclassifier(spec, input_shape, seed):
    """Parse a layer list like ``conv:8:3:same,relu,flatten,dense:64,tanh``."""
    rng = rngs.stream(seed, "init")
    layers, shape = [], tuple(input_shape)
    for token in filter(None, (t.strip() for t in spec.split(","))):
        name, *args = token.split(":")
        if name == "dense":
            if len(shape) != 1:
                layers.append(Flatten())
                shape = (int(np.prod(shape)),)
            layer = Dense(shape[0], int(args[0]), rng=rng)
        elif name == "conv":
            if len(shape) == 1:
                raise ConfigError("conv layer needs image-shaped input")
            k = int(args[1]) if len(args) > 1 else 3
            layer = Conv2d(shape[0], int(args[0]), k, args[2] if len(args) > 2 else "same", rng=rng)
        elif name == "bn":
            layer = BatchNorm1d(shape[0])
        elif name in Activation.FUNCTIONS:
            layer = Activation(name)
        elif name == "flatten":
            layer = Flatten()
        else:
            raise ConfigError(f"unknown layer token {token!r}")
        layers.append(layer)
        shape = layer.out_shape(shape)
    if len(shape) != 1:
        layers.append(Flatten())
    return Network(layers, input_shape)


@dataclass
class Splits:
    train: object
    val: object
    test: object


def prepare_data(config):
    ds = load_dataset(config.dataset, config.resolved_data_seed)
    sp = split(ds, config.split_fractions, config.resolved_data_seed)
    train, val, test = ds.subset(sp.train, "train"), ds.subset(sp.val, "val"), ds.subset(sp.test, "test")
    if config.normalize:
        norm, _ = normalize_channels(train)
        train, val, test = norm.apply(train), norm.apply(val), norm.apply(test)
    return Splits(train, val, test)


class PlainModel:
    """A pre-classifier plus one classifier layer, trained as a single network."""

    def __init__(self, pre, n_classes, seed, assignment_fn, optimizer="sgd"):
        clf = Dense(pre.output_dim, n_classes, rng=rngs.stream(seed, "classifier", 0))
        self.net = Network(pre.layers + [clf], pre.input_shape)
        self.partition = partition_features(self.net)
        self.assignment = assignment_fn(self.partition)
        self.optimizer = optimizer
        self.adam = AdamState() if optimizer == "adam" else None

    def step(self, x, y):
        out, cache = self.net.forward(x, TRAIN)
        loss, g = softmax_cross_entropy(out, y)
        if not np.isfinite(loss):
            return loss
        grads, _ = self.net.backward(cache, g)
        if self.adam is not None:
            adam_step(self.adam, self.net, grads, self.partition, self.assignment)
        else:
            sgd_step(self.net, grads, self.partition, self.assignment)
        return loss

    def log_probs(self, x):
        out, _ = self.net.forward(x, EVAL)
        return log_softmax(out)


class AlraoRunner:
    def __init__(self, model):
        self.model = model

    def step(self, x, y):
        return alrao_step(self.model, x, y)

    def log_probs(self, x):
        m = self.model
        z, _ = m.preclassifier.forward(x, EVAL)
        with np.errstate(divide="ignore"):
            log_a = np.log(m.averaging.posterior())
        parts = []
        for aj, c in zip(log_a, m.classifiers):
            lp = log_softmax(z @ c.params["weight"].T + c.params["bias"])
            if not np.all(np.isfinite(lp)):
                lp = np.full_like(lp, -np.log(m.n_classes))
            parts.append(aj + lp)
        return np.logaddexp.reduce(np.stack(parts), axis=0)


def make_runner(config, n_classes, input_shape, assignment_fn=None):
    pre = build_preclassifier(config.model, input_shape, config.seed)
    if config.optimizer in ("alrao", "alrao-adam"):
        model = build_alrao(pre, config.n_cl, n_classes, (config.eta_min, config.eta_max), config.seed,
                            averaging=config.averaging, theta=config.theta,
                            optimizer="adam" if config.optimizer == "alrao-adam" else "sgd")
        return AlraoRunner(model)
    lr = config.resolved_lr
    if assignment_fn is None:
        def assignment_fn(partition):
            return LrAssignment.uniform(partition, lr)
    return PlainModel(pre, n_classes, config.seed, assignment_fn, config.optimizer)


def evaluate(runner, ds):
    """Mean cross-entropy (nats) and top-1 accuracy on a dataset."""
    if len(ds) == 0:
        return float("nan"), float("nan")
    total, correct = 0.0, 0
    for start in range(0, len(ds), EVAL_CHUNK):
        x, y = ds.xs[start:start + EVAL_CHUNK], ds.ys[start:start + EVAL_CHUNK]
        with np.errstate(all="ignore"):
            lp = runner.log_probs(x)
        total += -lp[np.arange(len(y)), y].sum()
        correct += int((np.argmax(lp, axis=1) == y).sum())
    return float(total / len(ds)), correct / len(ds)


# --- run logs ----------------------------------------------------------------

@dataclass
class RunLog:
    run_id: str
    config: TrainConfig
    curves: list = field(default_factory=list)      # (run_id, epoch, split, loss, top1)
    posterior: list = field(default_factory=list)   # (step, t, a_1..a_n)
    lrs: list = field(default_factory=list)         # (group_id, layer, feature_index, lr)
    n_cl: int = 0
    status: str = "ok"
    failed_epoch: int | None = None
    best_epoch: int | None = None
    best_val_loss: float = float("inf")
    final_val_loss: float = float("inf")
    test_loss: float = float("inf")
    test_top1: float = float("nan")
    epochs_run: int = 0

    @property
    def failed(self):
        return self.status != "ok"


def _lr_rows(partition, assignment):
    return [(gid, g.layer, g.feature_index, float(lr))
            for gid, (g, lr) in enumerate(zip(partition.groups, assignment.lrs))]


def run_train(config, data=None, run_id=None, assignment_fn=None, trace_posterior=True):
    """Train with early stopping on validation loss; test once, at the best epoch."""
    data = data or prepare_data(config)
    n_classes = data.train.n_classes
    runner = make_runner(config, n_classes, data.train.input_shape, assignment_fn)
    runlog = RunLog(run_id or default_run_id(config), config)
    if isinstance(runner, AlraoRunner):
        runlog.n_cl = runner.model.n_cl
        runlog.lrs = _lr_rows(runner.model.partition, runner.model.feature_lrs)
        runlog.posterior.append((0, runner.model.averaging.t if hasattr(runner.model.averaging, "t") else 1,
                                 *map(float, runner.model.posterior())))
    else:
        runlog.lrs = _lr_rows(runner.partition, runner.assignment)

    shuffle = rngs.stream(config.seed, "shuffle")
    best_state, step = None, 0
    for epoch in range(1, config.max_epochs + 1):
        runlog.epochs_run = epoch
        diverged = False
        for idx in minibatches(len(data.train), config.batch_size, shuffle):
            x, y = data.train.xs[idx], data.train.ys[idx]
            step += 1
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    out = runner.step(x, y)
            except (AlraoStepError, FloatingPointError):
                diverged = True
                break
            if isinstance(runner, AlraoRunner):
                if trace_posterior:
                    st = runner.model.averaging
                    runlog.posterior.append((step, getattr(st, "t", step + 1), *map(float, out.posterior)))
            elif not np.isfinite(out):
                diverged = True
                break
        if not diverged:
            tr_loss, tr_top1 = evaluate(runner, data.train)
            va_loss, va_top1 = evaluate(runner, data.val)
            diverged = not (np.isfinite(tr_loss) and np.isfinite(va_loss))
        if diverged:
            runlog.status, runlog.failed_epoch = "failed", epoch
            runlog.curves.append((runlog.run_id, epoch, "val", float("inf"), float("nan")))
            runlog.best_val_loss = runlog.final_val_loss = float("inf")
            runlog.best_epoch = None
            log.info("%s diverged at epoch %d", runlog.run_id, epoch)
            return runlog
        runlog.curves.append((runlog.run_id, epoch, "train", tr_loss, tr_top1))
        runlog.curves.append((runlog.run_id, epoch, "val", va_loss, va_top1))
        runlog.final_val_loss = va_loss
        if va_loss < runlog.best_val_loss:
            runlog.best_val_loss, runlog.best_epoch = va_loss, epoch
            best_state = copy.deepcopy(runner)
        if epoch - runlog.best_epoch >= config.patience:
            break
    runlog.test_loss, runlog.test_top1 = evaluate(best_state, data.test)
    runlog.curves.append((runlog.run_id, runlog.best_epoch, "test", runlog.test_loss, runlog.test_top1))
    return runlog


def default_run_id(config):
    if config.optimizer in ("alrao", "alrao-adam"):
        return f"{config.optimizer}/eta_min={config.eta_min!r},eta_max={config.eta_max!r},seed={config.seed}"
    return f"{config.optimizer}/lr={config.resolved_lr!r},seed={config.seed}"


# --- CSV ---------------------------------------------------------------------

CURVE_COLUMNS = ("run_id", "epoch", "split", "loss", "top1")


def _num(v):
    return repr(float(v))


def emit_csv(runlog, out_dir):
    """Write curves.csv, posterior.csv, lrs.csv and config.echo; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {name: os.path.join(out_dir, name)
             for name in ("curves.csv", "posterior.csv", "lrs.csv", "config.echo")}
    with open(paths["curves.csv"], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for run_id, epoch, sp, loss, top1 in runlog.curves:
            w.writerow([run_id, "" if epoch is None else int(epoch), sp, _num(loss), _num(top1)])
    n = runlog.n_cl or (len(runlog.posterior[0]) - 2 if runlog.posterior else 0)
    with open(paths["posterior.csv"], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "t"] + [f"a_{j + 1}" for j in range(n)])
        for row in runlog.posterior:
            w.writerow([int(row[0]), int(row[1])] + [_num(a) for a in row[2:]])
    with open(paths["lrs.csv"], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("group_id", "layer", "feature_index", "lr"))
        for gid, layer, fi, lr in runlog.lrs:
            w.writerow([gid, layer, fi, _num(lr)])
    with open(paths["config.echo"], "w", encoding="utf-8") as f:
        f.write("\n".join(runlog.config.to_lines()) + "\n")
        f.write(f"# run_id = {runlog.run_id}\n# status = {runlog.status}\n")
        f.write(f"# failed_epoch = {runlog.failed_epoch}\n# best_epoch = {runlog.best_epoch}\n")
        f.write(f"# best_val_loss = {_num(runlog.best_val_loss)}\n")
        f.write(f"# test_loss = {_num(runlog.test_loss)}\n# test_top1 = {_num(runlog.test_top1)}\n")
    return paths


def read_curves(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for r in csv.DictReader(f):
            epoch = int(r["epoch"]) if r["epoch"] else None
            rows.append((r["run_id"], epoch, r["split"], float(r["loss"]), float(r["top1"])))
    return rows


def read_posterior(path):
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        next(reader)
        return [(int(r[0]), int(r[1]), *map(float, r[2:])) for r in reader]


def _safe(cell_id):
    return "".join(c if c.isalnum() or c in "-_.=" else "_" for c in cell_id)


# --- grids and sweeps ---------------------------------------------------------

def sgd_cell(config, lr, master_seed):
    cell_id = f"sgd/lr={float(lr)!r}"
    cfg = config.replace(optimizer="sgd", lr=float(lr), seed=rngs.derive_seed(master_seed, cell_id),
                         data_seed=config.resolved_data_seed)
    return cell_id, cfg


def alrao_cell(config, eta_min, eta_max, master_seed):
    cell_id = f"alrao/eta_min={float(eta_min)!r},eta_max={float(eta_max)!r}"
    opt = config.optimizer if config.optimizer in ("alrao", "alrao-adam") else "alrao"
    cfg = config.replace(optimizer=opt, eta_min=float(eta_min), eta_max=float(eta_max),
                         seed=rngs.derive_seed(master_seed, cell_id), data_seed=config.resolved_data_seed)
    return cell_id, cfg


def _emit_cell(runlog, out_dir, cell_id):
    if out_dir:
        emit_csv(runlog, os.path.join(out_dir, _safe(cell_id)))


@dataclass
class GridResult:
    logs: dict
    best_lr: float | None

    @property
    def all_failed(self):
        return self.best_lr is None


def run_grid(config, lrs=DEFAULT_SGD_GRID, data=None, out_dir=None):
    """Plain SGD for every rate in ``lrs``; the best is picked on validation loss."""
    lrs = list(lrs)
    if not lrs:
        raise ConfigError("empty learning-rate list")
    data = data or prepare_data(config)
    logs = {}
    for lr in lrs:
        cell_id, cfg = sgd_cell(config, lr, config.seed)
        logs[float(lr)] = run_train(cfg, data, run_id=cell_id)
        _emit_cell(logs[float(lr)], out_dir, cell_id)
    ok = {lr: lg for lr, lg in logs.items() if not lg.failed and np.isfinite(lg.best_val_loss)}
    best = min(ok, key=lambda lr: ok[lr].best_val_loss) if ok else None
    if out_dir:
        with open(os.path.join(out_dir, "grid.csv"), "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("lr", "status", "best_epoch", "best_val_loss", "test_loss", "test_top1", "selected"))
            for lr, lg in logs.items():
                w.writerow([_num(lr), lg.status, lg.best_epoch or "", _num(lg.best_val_loss),
                            _num(lg.test_loss), _num(lg.test_top1), int(lr == best)])
    return GridResult(logs, best)


@dataclass
class SweepResult:
    eta_grid: list
    loss: np.ndarray       # final validation loss, [i, j] for eta_min=grid[i], eta_max=grid[j]; NaN below the diagonal
    status: np.ndarray
    logs: dict


def run_interval_sweep(config, eta_grid, data=None, out_dir=None):
    """Alrao for every pair eta_min < eta_max of the grid, plain SGD on the diagonal.

    Each cell trains for a fixed budget without early stopping and reports its
    final validation loss; a diverged cell reports +inf.
    """
    grid = [float(e) for e in eta_grid]
    if grid != sorted(grid):
        raise ConfigError("eta grid must be sorted")
    data = data or prepare_data(config)
    n = len(grid)
    loss = np.full((n, n), np.nan)
    status = np.full((n, n), "", dtype=object)
    logs = {}
    for i in range(n):
        for j in range(i, n):
            if i == j:
                cell_id, cfg = sgd_cell(config, grid[i], config.seed)
                budget = config.sweep_sgd_epochs
            else:
                cell_id, cfg = alrao_cell(config, grid[i], grid[j], config.seed)
                budget = config.sweep_alrao_epochs
            cfg = cfg.replace(max_epochs=budget, patience=budget)
            lg = run_train(cfg, data, run_id=cell_id)
            _emit_cell(lg, out_dir, cell_id)
            logs[(i, j)] = lg
            loss[i, j] = lg.final_val_loss
            status[i, j] = lg.status
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "sweep.csv"), "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("eta_min", "eta_max", "kind", "status", "final_val_loss", "epochs"))
            for (i, j), lg in logs.items():
                w.writerow([_num(grid[i]), _num(grid[j]), "sgd" if i == j else "alrao", lg.status,
                            _num(lg.final_val_loss), lg.epochs_run])
    return SweepResult(grid, loss, status, logs)


def run_frozen(config, ps, data=None, out_dir=None):
    """Plain SGD at ``config.lr`` where each feature trains with probability p, else stays at init.

    All p share the run's init and data order; only the mask differs.
    """
    ps = [float(p) for p in ps]
    if any(not 0 <= p <= 1 for p in ps):
        raise ConfigError("probabilities must lie in [0, 1]")
    cfg = config.replace(optimizer="sgd")
    cfg.validate()
    data = data or prepare_data(cfg)
    logs = {}
    for p in ps:
        mask_rng = rngs.stream(cfg.seed, f"freeze/p={p!r}")

        def assignment_fn(partition, p=p, mask_rng=mask_rng):
            return freeze_mask(LrAssignment.uniform(partition, cfg.lr), p, cfg.lr, mask_rng)

        run_id = f"frozen/p={p!r},lr={cfg.lr!r},seed={cfg.seed}"
        logs[p] = run_train(cfg, data, run_id=run_id, assignment_fn=assignment_fn)
        _emit_cell(logs[p], out_dir, run_id)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "frozen.csv"), "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("p", "seed", "trained_fraction", "status", "test_loss", "test_top1"))
            for p, lg in logs.items():
                frac = np.mean([row[3] > 0 for row in lg.lrs]) if lg.lrs else float("nan")
                w.writerow([_num(p), cfg.seed, _num(frac), lg.status, _num(lg.test_loss), _num(lg.test_top1)])
    return logs
