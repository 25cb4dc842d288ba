"""Brute-force enumeration over every latent path, for small instances only.

Each path ``z_{p+1}..z_T`` gets the complete-data log weight::

    log rho[z_{p+1}] + sum_t log trans[z_{t-1}, z_t] + sum_t log f(y_t | z_t)

and marginals are formed by log-sum-exp over paths taken in lexicographic
order. Nothing here shares code with the recursions in
:mod:`hmmar.forward_backward`; only the emission log-densities are common.
These functions refuse rather than approximate when the path count
exceeds the budget.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from hmmar.errors import BudgetExceededError, InvalidInputError
from hmmar.forward_backward import Posteriors
from hmmar.model import HmMarParams, TimeSeries, as_series, log_emission_matrix


@dataclass(frozen=True)
class EnumerationBudget:
    max_sequences: int = 10**6

    def __post_init__(self):
        if self.max_sequences < 1:
            raise InvalidInputError("max_sequences must be positive")


def _paths(K: int, n: int, budget: EnumerationBudget) -> np.ndarray:
    count = K**n
    if count > budget.max_sequences:
        raise BudgetExceededError(f"{K}^{n} = {count} latent paths exceed the budget of {budget.max_sequences}")
    return np.array(list(itertools.product(range(K), repeat=n)), dtype=np.int64).reshape(count, n)


def _path_log_weights(paths: np.ndarray, logb: np.ndarray, params: HmMarParams, first: int = 0,
                      start_state=None) -> np.ndarray:
    """Log weights of ``paths`` covering rows ``first..first+n-1`` of ``logb``.

    With ``start_state`` None the first step is weighted by ``rho``;
    otherwise by the transition out of ``start_state``.
    """
    with np.errstate(divide="ignore"):
        log_rho = np.log(params.rho)
        log_trans = np.log(params.trans)
    n = paths.shape[1]
    rows = np.arange(first, first + n)
    lw = logb[rows, paths].sum(axis=1)
    lw += log_rho[paths[:, 0]] if start_state is None else log_trans[start_state, paths[:, 0]]
    if n > 1:
        lw += log_trans[paths[:, :-1], paths[:, 1:]].sum(axis=1)
    return lw


def _setup(series, params):
    series = as_series(series)
    logb = log_emission_matrix(series, params)
    return series, logb, logb.shape[0]


def enumerate_loglik(series: TimeSeries, params: HmMarParams,
                     budget: EnumerationBudget = EnumerationBudget()) -> float:
    """``log F(y_{p+1}..y_T | y_1..y_p)`` by summing over all ``K**(T-p)`` paths."""
    _, logb, n = _setup(series, params)
    paths = _paths(params.K, n, budget)
    return float(logsumexp(_path_log_weights(paths, logb, params)))


def enumerate_posteriors(series: TimeSeries, params: HmMarParams,
                         budget: EnumerationBudget = EnumerationBudget()) -> Posteriors:
    _, logb, n = _setup(series, params)
    K = params.K
    paths = _paths(K, n, budget)
    lw = _path_log_weights(paths, logb, params)
    total = logsumexp(lw)
    w = np.exp(lw - total)
    gamma = np.zeros((n, K))
    for s in range(n):
        gamma[s] = np.bincount(paths[:, s], weights=w, minlength=K)
    xi = np.zeros((max(n - 1, 0), K, K))
    for s in range(1, n):
        flat = np.bincount(paths[:, s - 1] * K + paths[:, s], weights=w, minlength=K * K)
        xi[s - 1] = flat.reshape(K, K)
    return Posteriors(gamma, xi, float(total))


def enumerate_alpha(series: TimeSeries, params: HmMarParams, t: int, h: int,
                    budget: EnumerationBudget = EnumerationBudget()) -> float:
    """Unscaled forward variable ``F(y_{p+1}..y_t, Z_t = h | y_1..y_p)``; ``t`` and ``h`` 1-based."""
    _, logb, n = _setup(series, params)
    s = _time_row(t, params.p, n)
    paths = _paths(params.K, s + 1, budget)
    paths = paths[paths[:, -1] == h - 1]
    return float(np.exp(logsumexp(_path_log_weights(paths, logb, params))))


def enumerate_beta(series: TimeSeries, params: HmMarParams, t: int, h: int,
                   budget: EnumerationBudget = EnumerationBudget()) -> float:
    """Unscaled backward variable ``F(y_{t+1}..y_T | y_1..y_t, Z_t = h)``; ``t`` and ``h`` 1-based."""
    _, logb, n = _setup(series, params)
    s = _time_row(t, params.p, n)
    if s == n - 1:
        return 1.0
    paths = _paths(params.K, n - 1 - s, budget)
    return float(np.exp(logsumexp(_path_log_weights(paths, logb, params, first=s + 1, start_state=h - 1))))


def enumerate_future_loglik(series: TimeSeries, params: HmMarParams, past_states: Sequence[int],
                            budget: EnumerationBudget = EnumerationBudget()) -> float:
    """``log F(y_{t+1}..y_T | y_1..y_t, z_{p+1}..z_t)`` from full-path sums.

    ``past_states`` are the 1-based states ``z_{p+1}..z_t``. The value is
    the ratio of the joint weight of all paths extending the given prefix
    to the weight of the prefix itself, so it uses the whole latent history
    rather than only its last state.
    """
    _, logb, n = _setup(series, params)
    prefix = np.asarray(past_states, dtype=np.int64) - 1
    m = prefix.size
    if not 1 <= m <= n:
        raise InvalidInputError(f"need between 1 and {n} past states, got {m}")
    paths = _paths(params.K, n, budget)
    match = np.all(paths[:, :m] == prefix, axis=1)
    joint = logsumexp(_path_log_weights(paths[match], logb, params))
    head = _path_log_weights(prefix[None, :], logb, params)[0]
    return float(joint - head)


def _time_row(t: int, p: int, n: int) -> int:
    s = t - p - 1
    if not 0 <= s < n:
        raise InvalidInputError(f"t={t} outside the modelled range {p + 1}..{p + n}")
    return s
