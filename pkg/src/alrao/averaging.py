"""Online model averaging over classifier clones.

Two schemes are provided. ``switch_*`` is the switch distribution, a Bayesian
mixture over sequences of "which classifier predicts now", computed exactly
by a two-state forward algorithm. ``bma_*`` is plain Bayesian model averaging.
``switch_bruteforce_oracle`` enumerates switch sequences explicitly and is
only meant for checking the forward algorithm on tiny instances.

Switch prior: the first classifier and every later one are uniform over the
N clones; after each segment starts, the process either keeps the right to
switch again (probability theta) or freezes for good (1 - theta); the time
of the next switch t (counted in observations seen) has prior 1/(t(t+1)),
conditioned on being after the previous one. Its hazard after t
observations is 1/(t+1).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from . import kernels

DEFAULT_THETA = 0.999
LOGLIK_FLOOR = -30.0


def _normalize_log(v):
    mx = np.max(v)
    return np.exp(v - mx) / np.sum(np.exp(v - mx))


def _check_log_lik(log_lik, n_cl):
    ll = np.asarray(log_lik, dtype=np.float64).reshape(-1)
    if ll.shape != (n_cl,):
        raise ValueError(f"expected {n_cl} log-likelihoods, got {ll.shape[0]}")
    if np.any(np.isnan(ll)) or np.any(ll == np.inf):
        raise ValueError("log-likelihoods must not be NaN or +inf")
    return ll


@dataclass(frozen=True)
class SwitchState:
    log_wa: np.ndarray  # may still switch
    log_wb: np.ndarray  # frozen: no further switches
    theta: float
    t: int
    n_cl: int

    def posterior(self):
        return _normalize_log(np.logaddexp(self.log_wa, self.log_wb))


def switch_init(n_cl, theta=DEFAULT_THETA):
    n_cl = int(n_cl)
    if n_cl < 1:
        raise ValueError("need at least one classifier")
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must be in (0, 1), got {theta}")
    return SwitchState(
        log_wa=np.full(n_cl, np.log(theta) - np.log(n_cl)),
        log_wb=np.full(n_cl, np.log1p(-theta) - np.log(n_cl)),
        theta=float(theta),
        t=1,
        n_cl=n_cl,
    )


def switch_update(state, log_lik):
    """One forward-algorithm step; returns the new state and the posterior over the next classifier."""
    ll = _check_log_lik(log_lik, state.n_cl)
    if np.all(np.logaddexp(state.log_wa, state.log_wb) + ll == -np.inf):
        raise ValueError("every classifier assigns zero probability to the observation")
    wa, wb = kernels.switch_step(
        np.ascontiguousarray(state.log_wa), np.ascontiguousarray(state.log_wb),
        np.ascontiguousarray(ll), state.t, state.theta,
    )
    new = replace(state, log_wa=np.asarray(wa), log_wb=np.asarray(wb), t=state.t + 1)
    return new, new.posterior()


@dataclass(frozen=True)
class BmaState:
    log_w: np.ndarray

    @property
    def n_cl(self):
        return len(self.log_w)

    def posterior(self):
        return _normalize_log(self.log_w)


def bma_init(n_cl, prior=None):
    n_cl = int(n_cl)
    if n_cl < 1:
        raise ValueError("need at least one classifier")
    p = np.full(n_cl, 1.0 / n_cl) if prior is None else np.asarray(prior, dtype=np.float64)
    return BmaState(np.log(p))


def bma_update(state, log_lik):
    ll = _check_log_lik(log_lik, state.n_cl)
    log_w = state.log_w + ll
    if np.all(log_w == -np.inf):
        raise ValueError("every classifier assigns zero probability to the observation")
    new = BmaState(log_w - np.logaddexp.reduce(log_w))
    return new, new.posterior()


def averaging_init(method, n_cl, theta=DEFAULT_THETA):
    if method == "switch":
        return switch_init(n_cl, theta)
    if method == "bma":
        return bma_init(n_cl)
    raise ValueError(f"unknown averaging method {method!r}")


def averaging_update(state, log_lik):
    if isinstance(state, SwitchState):
        return switch_update(state, log_lik)
    return bma_update(state, log_lik)


def _switch_time_prior(t):
    return 1.0 / (t * (t + 1.0))


def _switch_time_tail(t):
    """P(next switch time >= t) under 1/(s(s+1)), s >= 1: one minus the finite head."""
    return 1.0 - sum(_switch_time_prior(s) for s in range(1, t))


def switch_bruteforce_oracle(log_lik_matrix, theta=DEFAULT_THETA, n_cl=None):
    """Posterior of the classifier used for observation T+1, by enumerating every switch sequence.

    ``log_lik_matrix[s, j]`` is classifier j's log-likelihood of observation
    s+1. Bounded to T <= 8 observations and at most 4 classifiers.
    """
    m = np.asarray(log_lik_matrix, dtype=np.float64)
    if m.ndim != 2:
        if n_cl is None or m.size != 0:
            raise ValueError("log_lik_matrix must be T x n_cl")
        m = m.reshape(0, n_cl)
    T, n = m.shape
    if T > 8 or n > 4:
        raise ValueError(f"enumeration bound exceeded (T={T} > 8 or n_cl={n} > 4)")
    if n < 1:
        raise ValueError("need at least one classifier")
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must be in (0, 1), got {theta}")
    log_theta = np.log(theta)
    out = np.full(n, -np.inf)
    # a segment starting at observation u (u = 2..T+1) is a switch after t = u-1 observations
    for k in range(T + 1):
        for later in itertools.combinations(range(2, T + 2), k):
            starts = (1,) + later
            L = len(starts)
            ends = starts[1:] + (T + 1,)
            log_prior_times = 0.0
            for prev, nxt in zip(starts[:-1], starts[1:]):
                # theta: the previous segment kept its right to switch
                t_prev, t_next = prev - 1, nxt - 1
                log_prior_times += log_theta + np.log(
                    _switch_time_prior(t_next) / _switch_time_tail(t_prev + 1))
            # last segment: frozen, or still free but no switch within the horizon
            t_last = starts[-1] - 1
            p_last = (1.0 - theta) + theta * _switch_time_tail(T + 1) / _switch_time_tail(t_last + 1)
            log_prior_times += np.log(p_last) - L * np.log(n)
            seg_ll = np.array([[m[s - 1:e - 1, j].sum() for j in range(n)]
                               for s, e in zip(starts, ends)])  # L x n
            assignments = np.array(list(itertools.product(range(n), repeat=L)))
            total = seg_ll[np.arange(L), assignments].sum(axis=1) + log_prior_times
            for j in range(n):
                sel = total[assignments[:, -1] == j]
                out[j] = np.logaddexp(out[j], np.logaddexp.reduce(sel))
    return _normalize_log(out)


def classifier_log_likelihood(log_probs, y, floor=LOGLIK_FLOOR):
    """Batch log-likelihood of one classifier: sum over samples of log p(y), floored per sample."""
    lp = np.asarray(log_probs, dtype=np.float64)
    picked = lp[np.arange(len(y)), y]
    picked = np.where(np.isfinite(picked), picked, floor)
    return float(np.maximum(picked, floor).sum())


def gaussian_log_likelihood(pred, target, floor=LOGLIK_FLOOR):
    """Regression adapter: unit-variance Gaussian density at the prediction, floored per sample."""
    pred = np.asarray(pred, dtype=np.float64).reshape(len(target), -1)
    target = np.asarray(target, dtype=np.float64).reshape(len(target), -1)
    per = -0.5 * ((target - pred) ** 2 + np.log(2 * np.pi)).sum(axis=1)
    per = np.where(np.isfinite(per), per, floor)
    return float(np.maximum(per, floor).sum())
