"""Convergence check in the convex case.

Setting: the pre-classifier is the identity, every clone is an L2-regularized
softmax (logistic) classifier trained by full-batch gradient descent at its
own rate, and the clones are combined by Bayesian model averaging. When at
least one rate is below 1/lambda (lambda bounding the Hessian), the averaged
model's loss should end up no worse than the optimum L*.

L* and lambda come from code paths that do not touch the network engine:
``logistic_objective`` is written out directly, L* is the end point of a long
small-step gradient descent, and lambda is the top Hessian eigenvalue found
by power iteration on finite-difference Hessian-vector products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .averaging import bma_update
from .engine import build_alrao
from .harness import load_dataset
from .nn import Network, log_softmax

PASS, FAIL, UNMET = "PASS", "FAIL", "hypothesis-unmet"


def logistic_objective(W, b, X, y, l2):
    """Mean multinomial log-loss plus (l2/2)(|W|^2 + |b|^2), with its gradient."""
    n, k = len(y), W.shape[0]
    scores = X @ W.T + b
    scores = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    p = e / e.sum(axis=1, keepdims=True)
    onehot = np.eye(k)[y]
    loss = -np.mean(np.log(p[np.arange(n), y])) + 0.5 * l2 * (np.sum(W * W) + np.sum(b * b))
    r = (p - onehot) / n
    return loss, r.T @ X + l2 * W, r.sum(axis=0) + l2 * b


def gd_oracle(X, y, n_classes, l2, lr, max_steps=200_000, gtol=1e-12):
    """Full-batch gradient descent from zero; returns (loss, W, b)."""
    W = np.zeros((n_classes, X.shape[1]))
    b = np.zeros(n_classes)
    for _ in range(max_steps):
        loss, gW, gb = logistic_objective(W, b, X, y, l2)
        if np.sqrt(np.sum(gW * gW) + np.sum(gb * gb)) < gtol:
            break
        W -= lr * gW
        b -= lr * gb
    return float(logistic_objective(W, b, X, y, l2)[0]), W, b


def hessian_top_eigenvalue(X, y, n_classes, l2, at=None, iters=300, eps=1e-5, seed=0):
    """Largest Hessian eigenvalue of the regularized objective at ``at`` (default: zero).

    For two classes the curvature p(1-p) of the log-loss peaks at p = 1/2,
    i.e. at zero parameters, so the value there bounds the Hessian everywhere.
    """
    d = X.shape[1]
    size = n_classes * (d + 1)
    theta0 = np.zeros(size) if at is None else np.asarray(at, dtype=np.float64)

    def grad(theta):
        W, b = theta[:n_classes * d].reshape(n_classes, d), theta[n_classes * d:]
        _, gW, gb = logistic_objective(W, b, X, y, l2)
        return np.concatenate([gW.ravel(), gb])

    v = np.random.default_rng(seed).normal(size=size)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        hv = (grad(theta0 + eps * v) - grad(theta0 - eps * v)) / (2 * eps)
        lam = float(v @ hv)
        norm = np.linalg.norm(hv)
        if norm == 0:
            break
        v = hv / norm
    return lam


@dataclass
class ConvexReport:
    verdict: str
    lam: float
    l_star: float
    final_loss: float
    classifier_lrs: list
    posterior: np.ndarray
    steps: int
    tol: float

    def lines(self):
        return [
            f"verdict = {self.verdict}",
            f"lambda = {self.lam!r}",
            f"one_over_lambda = {1.0 / self.lam!r}",
            f"l_star = {self.l_star!r}",
            f"final_loss = {self.final_loss!r}",
            f"gap = {self.final_loss - self.l_star!r}",
            f"tol = {self.tol!r}",
            f"steps = {self.steps}",
            "classifier_lrs = " + ",".join(repr(float(v)) for v in self.classifier_lrs),
            "posterior = " + ",".join(repr(float(v)) for v in self.posterior),
        ]


def alrao_loss(model, X, y, l2):
    """Loss of the averaged classifier plus the posterior-weighted L2 penalty."""
    a = model.averaging.posterior()
    with np.errstate(divide="ignore"):
        log_a = np.log(a)
    rows = np.arange(len(y))
    picked = np.stack([log_softmax(X @ c.params["weight"].T + c.params["bias"])[rows, y] + la
                       for c, la in zip(model.classifiers, log_a)])
    data = -np.mean(np.logaddexp.reduce(picked, axis=0))
    penalty = sum(aj * 0.5 * l2 * (np.sum(c.params["weight"] ** 2) + np.sum(c.params["bias"] ** 2))
                  for aj, c in zip(a, model.classifiers))
    return float(data + penalty)


def run_convex_check(config, data=None):
    ds = data or load_dataset(config.dataset, config.resolved_data_seed)
    X, y = ds.xs.reshape(len(ds), -1), ds.ys
    n, k, l2 = len(y), ds.n_classes, config.l2

    lam = hessian_top_eigenvalue(X, y, k, l2)
    l_star, W_star, b_star = gd_oracle(X, y, k, l2, lr=0.5 / lam)
    lam = max(lam, hessian_top_eigenvalue(X, y, k, l2, at=np.concatenate([W_star.ravel(), b_star])))

    pre = Network([], (X.shape[1],))
    model = build_alrao(pre, config.n_cl, k, (config.eta_min, config.eta_max), config.seed, averaging="bma")
    if not any(eta < 1.0 / lam for eta in model.classifier_lrs):
        return ConvexReport(UNMET, lam, l_star, float("nan"), model.classifier_lrs,
                            model.averaging.posterior(), 0, config.convex_tol)

    for _ in range(config.convex_steps):
        log_lik = []
        for c, eta in zip(model.classifiers, model.classifier_lrs):
            W, b = c.params["weight"], c.params["bias"]
            lp = log_softmax(X @ W.T + b)
            loss = -lp[np.arange(n), y].mean() + 0.5 * l2 * (np.sum(W * W) + np.sum(b * b))
            g = np.exp(lp)
            g[np.arange(n), y] -= 1.0
            g /= n
            log_lik.append(-n * loss if np.isfinite(loss) else -np.inf)
            W -= eta * (g.T @ X + l2 * W)
            b -= eta * (g.sum(axis=0) + l2 * b)
        model.averaging, _ = bma_update(model.averaging, log_lik)

    final = alrao_loss(model, X, y, l2)
    verdict = PASS if final <= l_star + config.convex_tol else FAIL
    return ConvexReport(verdict, lam, l_star, final, model.classifier_lrs, model.averaging.posterior(),
                        config.convex_steps, config.convex_tol)
