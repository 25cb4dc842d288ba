"""Scaled forward-backward recursions, smoothed posteriors and MAP decoding.

Forward variables are kept normalised, ``alpha_hat[s] = P(Z_t | y_1..y_t)``
for ``t = p + 1 + s``, with scaling constants ``c_t`` such that the
unscaled forward variable is ``alpha_hat[s] * prod(c[:s + 1])`` and
``sum(log c) = log F(y_{p+1}..y_T | y_1..y_p)``. The backward pass starts
from ``beta_hat[-1] = 1`` and divides by ``c_{t+1}`` at every step, so the
unscaled backward variable is ``beta_hat[s] * prod(c[s + 1:])`` and
``alpha_hat * beta_hat`` is directly the smoothed posterior.

Emission densities are handled in log space; ``c_t`` is formed by a
log-sum-exp so that a tiny ``sigma_k`` cannot underflow a whole step.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numba
import numpy as np
from numpy.typing import ArrayLike, NDArray

from hmmar.errors import InvalidInputError, NumericalFailureError
from hmmar.model import HmMarParams, TimeSeries, as_series, log_emission_matrix


@numba.njit(cache=True, nogil=True)
def _forward_kernel(logb, rho, trans, alpha_hat, log_c):
    n, K = logb.shape
    pred = rho.copy()
    tmp = np.empty(K)
    for s in range(n):
        if s > 0:
            for h in range(K):
                acc = 0.0
                for m in range(K):
                    acc += alpha_hat[s - 1, m] * trans[m, h]
                pred[h] = acc
        top = -np.inf
        for h in range(K):
            if pred[h] > 0.0:
                tmp[h] = math.log(pred[h]) + logb[s, h]
            else:
                tmp[h] = -np.inf
            if tmp[h] > top:
                top = tmp[h]
        if not top > -np.inf:
            return s
        tot = 0.0
        for h in range(K):
            tot += math.exp(tmp[h] - top)
        log_c[s] = top + math.log(tot)
        for h in range(K):
            alpha_hat[s, h] = math.exp(tmp[h] - log_c[s])
    return -1


@numba.njit(cache=True, nogil=True)
def _backward_kernel(logb, trans, log_c, beta_hat):
    n, K = logb.shape
    w = np.empty(K)
    for h in range(K):
        beta_hat[n - 1, h] = 1.0
    for s in range(n - 2, -1, -1):
        for j in range(K):
            w[j] = math.exp(logb[s + 1, j] - log_c[s + 1]) * beta_hat[s + 1, j]
        for h in range(K):
            acc = 0.0
            for j in range(K):
                if trans[h, j] > 0.0:
                    acc += trans[h, j] * w[j]
            beta_hat[s, h] = acc


@numba.njit(cache=True, nogil=True)
def _posterior_kernel(logb, trans, alpha_hat, beta_hat, log_c, gamma, xi):
    n, K = logb.shape
    for s in range(n):
        tot = 0.0
        for h in range(K):
            # alpha_hat == 0 marks an unreachable state whose beta_hat may be inf
            g = alpha_hat[s, h] * beta_hat[s, h] if alpha_hat[s, h] > 0.0 else 0.0
            gamma[s, h] = g
            tot += g
        for h in range(K):
            gamma[s, h] /= tot
    for s in range(1, n):
        tot = 0.0
        for i in range(K):
            for j in range(K):
                v = 0.0
                if alpha_hat[s - 1, i] > 0.0 and trans[i, j] > 0.0 and alpha_hat[s, j] > 0.0:
                    v = (alpha_hat[s - 1, i] * trans[i, j]
                         * math.exp(logb[s, j] - log_c[s]) * beta_hat[s, j])
                xi[s - 1, i, j] = v
                tot += v
        for i in range(K):
            for j in range(K):
                xi[s - 1, i, j] /= tot


@dataclass(frozen=True)
class FbPass:
    """Output of one scaled forward-backward sweep (rows are ``t = p+1..T``)."""

    alpha_hat: NDArray[np.float64]
    beta_hat: NDArray[np.float64] | None
    scales: NDArray[np.float64]
    loglik: float
    log_scales: NDArray[np.float64] | None = None

    def __post_init__(self):
        if self.log_scales is None:
            object.__setattr__(self, "log_scales", np.log(self.scales))

    def log_alpha(self) -> NDArray[np.float64]:
        """Logarithm of the unscaled forward variables."""
        with np.errstate(divide="ignore"):
            return np.log(self.alpha_hat) + np.cumsum(self.log_scales)[:, None]

    def log_beta(self) -> NDArray[np.float64]:
        """Logarithm of the unscaled backward variables."""
        if self.beta_hat is None:
            raise ValueError("backward pass was not run")
        log_c = self.log_scales
        tail = np.concatenate([np.cumsum(log_c[::-1])[::-1][1:], [0.0]])
        with np.errstate(divide="ignore"):
            return np.log(self.beta_hat) + tail[:, None]


@dataclass(frozen=True)
class Posteriors:
    """Smoothed posteriors.

    ``gamma[s, h] = P(Z_t = h | y_1..y_T)`` for ``t = p + 1 + s`` and
    ``xi[s, i, j] = P(Z_{t-1} = i, Z_t = j | y_1..y_T)`` for ``t = p + 2 + s``.
    """

    gamma: NDArray[np.float64]
    xi: NDArray[np.float64]
    loglik: float = float("nan")

    def to_csv(self, p: int) -> str:
        """CSV with header ``t,gamma_1..gamma_K``; rows for ``t = p+1..T``."""
        K = self.gamma.shape[1]
        buf = io.StringIO()
        buf.write(",".join(["t"] + [f"gamma_{k + 1}" for k in range(K)]) + "\n")
        for s, row in enumerate(self.gamma):
            buf.write(",".join([str(p + 1 + s)] + [repr(float(v)) for v in row]) + "\n")
        return buf.getvalue()


def _log_b(series: TimeSeries, params: HmMarParams) -> NDArray[np.float64]:
    logb = log_emission_matrix(series, params)
    if not np.all(np.isfinite(logb)):
        s = int(np.flatnonzero(~np.all(np.isfinite(logb), axis=1))[0])
        raise NumericalFailureError(f"non-finite emission log-density at t={params.p + 1 + s}", t=params.p + 1 + s)
    return logb


def _forward_from_logb(logb: NDArray, params: HmMarParams) -> tuple[NDArray, NDArray]:
    n, K = logb.shape
    alpha_hat = np.empty((n, K))
    log_c = np.empty(n)
    failed = _forward_kernel(logb, np.ascontiguousarray(params.rho), np.ascontiguousarray(params.trans),
                             alpha_hat, log_c)
    if failed >= 0:
        t = params.p + 1 + failed
        raise NumericalFailureError(
            f"all {K} components have zero predictive density at t={t}; parameters misfit the data", t=t
        )
    return alpha_hat, log_c


def forward(series: TimeSeries | ArrayLike, params: HmMarParams) -> FbPass:
    """Normalised forward recursion.

    Returns an :class:`FbPass` with ``beta_hat=None``. ``exp(loglik)``
    equals the sum of the unscaled forward variables at ``t = T``.
    """
    series = as_series(series)
    logb = _log_b(series, params)
    alpha_hat, log_c = _forward_from_logb(logb, params)
    return FbPass(alpha_hat, None, np.exp(log_c), float(log_c.sum()), log_c)


def backward(series: TimeSeries | ArrayLike, params: HmMarParams, scales: ArrayLike | FbPass) -> NDArray[np.float64]:
    """Scaled backward recursion using the scaling constants of a forward pass.

    ``scales`` may be the :class:`FbPass` itself, which avoids a round
    trip through ``exp`` for extreme densities.
    """
    series = as_series(series)
    logb = _log_b(series, params)
    if isinstance(scales, FbPass):
        log_c = np.asarray(scales.log_scales)
    else:
        scales = np.asarray(scales, dtype=float)
        if np.any(scales <= 0):
            raise InvalidInputError("scales must be positive")
        log_c = np.log(scales)
    if log_c.shape != (logb.shape[0],):
        raise InvalidInputError("scales do not come from a forward pass on this series")
    beta_hat = np.empty_like(logb)
    _backward_kernel(logb, np.ascontiguousarray(params.trans), log_c, beta_hat)
    return beta_hat


def forward_backward(series: TimeSeries | ArrayLike, params: HmMarParams) -> tuple[FbPass, Posteriors]:
    series = as_series(series)
    logb = _log_b(series, params)
    alpha_hat, log_c = _forward_from_logb(logb, params)
    trans = np.ascontiguousarray(params.trans)
    beta_hat = np.empty_like(logb)
    _backward_kernel(logb, trans, log_c, beta_hat)
    n, K = logb.shape
    gamma = np.empty((n, K))
    xi = np.empty((max(n - 1, 0), K, K))
    _posterior_kernel(logb, trans, alpha_hat, beta_hat, log_c, gamma, xi)
    loglik = float(log_c.sum())
    if not (np.all(np.isfinite(gamma)) and np.all(np.isfinite(xi))):
        raise NumericalFailureError("smoothed posteriors are not finite")
    return FbPass(alpha_hat, beta_hat, np.exp(log_c), loglik, log_c), Posteriors(gamma, xi, loglik)


def posteriors(series: TimeSeries | ArrayLike, params: HmMarParams) -> Posteriors:
    """Smoothed state and pairwise posteriors; ``loglik`` is carried along."""
    return forward_backward(series, params)[1]


def filtered(series: TimeSeries | ArrayLike, params: HmMarParams) -> NDArray[np.float64]:
    """Filtered probabilities ``P(Z_t = . | y_1..y_t)`` for ``t = p+1..T``."""
    return forward(series, params).alpha_hat


def decode_map_path(series: TimeSeries | ArrayLike, params: HmMarParams) -> NDArray[np.int64]:
    """Most likely hidden path ``z_{p+1}..z_T`` (1-based labels), max-product recursion.

    Ties go to the lower state index.
    """
    series = as_series(series)
    logb = _log_b(series, params)
    n, K = logb.shape
    with np.errstate(divide="ignore"):
        log_trans = np.log(params.trans)
        delta = np.log(params.rho) + logb[0]
    back = np.zeros((n, K), dtype=np.int64)
    for s in range(1, n):
        cand = delta[:, None] + log_trans
        back[s] = np.argmax(cand, axis=0)
        delta = cand[back[s], np.arange(K)] + logb[s]
    if not np.any(np.isfinite(delta)):
        raise NumericalFailureError("every path has zero density")
    path = np.empty(n, dtype=np.int64)
    path[-1] = int(np.argmax(delta))
    for s in range(n - 1, 0, -1):
        path[s - 1] = back[s, path[s]]
    return path + 1


def forecast_one_step(series: TimeSeries | ArrayLike, params: HmMarParams) -> dict:
    """Predictive distribution of ``y_{T+1}``: mixture weights, component means and mean."""
    series = as_series(series)
    t = series.T + 1
    weights = params.trans.T @ forward(series, params).alpha_hat[-1]
    means = params.coeffs @ series.regressor(t, params.p)
    return {
        "t": t,
        "mean": float(weights @ means),
        "weights": weights.tolist(),
        "component_means": means.tolist(),
    }
