"""EM estimation of HM-MAR(K, p): forward-backward E-step, closed-form M-step, restarts.

The M-step maximises the expected complete-data log-likelihood block by
block given the smoothed posteriors ``gamma`` and ``xi``:

* ``A_k`` solves the weighted normal equations ``X' G_k X A_k = X' G_k y``
  with ``G_k = diag(gamma[:, k])``;
* ``sigma_k**2`` is the ``gamma``-weighted mean squared residual;
* row ``j`` of the transition matrix is ``sum_t xi_t[j, :]`` normalised
  by its own total;
* ``rho`` is ``gamma`` at ``t = p + 1`` (``rho_update="first"``) or the
  time-averaged occupancy ``mean_t gamma_t`` (``rho_update="occupancy"``).
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from hmmar.errors import FitFailedError, InvalidInputError, NumericalFailureError
from hmmar.forward_backward import Posteriors, posteriors
from hmmar.model import (
    LOG_SQRT_2PI,
    HmMarParams,
    TimeSeries,
    as_series,
    n_free_params,
    n_params,
)

log = logging.getLogger(__name__)

EMPTY_COMPONENT_TOL = 1e-12
# condition number above which a weighted Gram matrix counts as singular
SINGULAR_COND = 1e13


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 500
    tol: float = 1e-8
    n_restarts: int = 5
    seed: int = 0
    sigma_floor_factor: float = 1e-10
    ridge_factor: float = 1e-8
    rho_update: Literal["first", "occupancy"] = "first"

    def __post_init__(self):
        if self.max_iters < 1 or self.n_restarts < 1:
            raise InvalidInputError("max_iters and n_restarts must be >= 1")
        if not (self.tol > 0 and self.sigma_floor_factor > 0 and self.ridge_factor > 0):
            raise InvalidInputError("tol, sigma_floor_factor and ridge_factor must be positive")
        if self.seed < 0:
            raise InvalidInputError("seed must be non-negative")
        if self.rho_update not in ("first", "occupancy"):
            raise InvalidInputError(f"unknown rho_update {self.rho_update!r}")


@dataclass
class FitReport:
    params: HmMarParams
    loglik_trace: list[float]
    converged: bool
    iterations: int
    restart_logliks: list[float]
    warnings: list[str] = field(default_factory=list)
    best_restart: int = 0

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]

    @property
    def n_params(self) -> int:
        return n_params(self.params.K, self.params.p)

    def to_dict(self) -> dict[str, Any]:
        doc = self.params.to_dict()
        doc.update(
            loglik=self.loglik,
            n_params=self.n_params,
            n_free_params=n_free_params(self.params.K, self.params.p),
            converged=self.converged,
            iterations=self.iterations,
            best_restart=self.best_restart,
            loglik_trace=self.loglik_trace,
            restart_logliks=[v if math.isfinite(v) else None for v in self.restart_logliks],
            warnings=self.warnings,
        )
        return doc

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def summary(self) -> str:
        """Human-readable table with components ordered by intercept."""
        shown = self.params.sorted_by_intercept()
        lines = [
            f"HM-MAR(K={shown.K}, p={shown.p})  loglik={self.loglik:.6f}  "
            f"params={self.n_params}  iterations={self.iterations}  converged={self.converged}"
        ]
        for k in range(shown.K):
            a = ", ".join(f"{v:.4f}" for v in shown.coeffs[k])
            lines.append(f"  component {k + 1}: A=({a})  sigma={shown.sigmas[k]:.4f}  rho={shown.rho[k]:.4f}")
        for k in range(shown.K):
            lines.append("  trans " + " ".join(f"{v:.4f}" for v in shown.trans[k]))
        return "\n".join(lines)


def e_step(series: TimeSeries | ArrayLike, params: HmMarParams) -> Posteriors:
    return posteriors(series, params)


def expected_complete_loglik(series: TimeSeries | ArrayLike, params: HmMarParams, post: Posteriors) -> float:
    """Expected complete-data log-likelihood ``Q(params | posteriors)``.

    Terms with zero posterior weight contribute nothing even where the
    corresponding log-probability is ``-inf``.
    """
    series = as_series(series)
    X, y = series.design(params.p)
    resid = y[:, None] - X @ params.coeffs.T
    log_f = -LOG_SQRT_2PI - np.log(params.sigmas) - 0.5 * (resid / params.sigmas) ** 2
    with np.errstate(divide="ignore"):
        log_trans = np.log(params.trans)
        log_rho = np.log(params.rho)
    xi_sum = post.xi.sum(axis=0)
    q = float(np.sum(post.gamma * log_f))
    with np.errstate(invalid="ignore"):
        q += float(np.sum(np.where(xi_sum > 0, xi_sum * log_trans, 0.0)))
        q += float(np.sum(np.where(post.gamma[0] > 0, post.gamma[0] * log_rho, 0.0)))
    return q


def _solve_weighted(X, y, g, k, ridge_factor, notes):
    Xw = X * g[:, None]
    G = X.T @ Xw
    r = Xw.T @ y
    if np.linalg.cond(G) < SINGULAR_COND:
        return np.linalg.solve(G, r)
    lam = ridge_factor * np.trace(G) / G.shape[0]
    G_r = G + lam * np.eye(G.shape[0])
    if lam > 0 and np.linalg.cond(G_r) < SINGULAR_COND:
        notes.append(f"ridge applied to component {k + 1} (lambda={lam:.3e})")
        return np.linalg.solve(G_r, r)
    raise NumericalFailureError(f"weighted Gram matrix of component {k + 1} is singular", component=k + 1)


def m_step(series: TimeSeries | ArrayLike, post: Posteriors, prev: HmMarParams,
           cfg: FitConfig = FitConfig(), notes: list[str] | None = None) -> HmMarParams:
    """Closed-form maximiser of ``Q`` given the posteriors.

    Components whose total posterior weight is below ``1e-12`` keep their
    previous coefficients and sigma. Warnings are appended to ``notes``.
    """
    series = as_series(series)
    notes = [] if notes is None else notes
    K, p = prev.K, prev.p
    X, y = series.design(p)
    gamma, xi = post.gamma, post.xi
    if gamma.shape != (y.size, K) or xi.shape != (max(y.size - 1, 0), K, K):
        raise InvalidInputError("posteriors do not match the series length or K")

    coeffs = np.array(prev.coeffs)
    sigmas = np.array(prev.sigmas)
    floor = math.sqrt(cfg.sigma_floor_factor * float(np.var(series.values)))
    for k in range(K):
        g = gamma[:, k]
        weight = g.sum()
        if weight < EMPTY_COMPONENT_TOL:
            notes.append(f"empty component {k + 1} frozen at previous values")
            continue
        coeffs[k] = _solve_weighted(X, y, g, k, cfg.ridge_factor, notes)
        resid = y - X @ coeffs[k]
        sigma = math.sqrt(float(g @ resid**2) / weight)
        if not sigma > floor:
            notes.append(f"variance floor hit by component {k + 1}")
            sigma = floor
        sigmas[k] = sigma

    trans = np.array(prev.trans)
    if xi.shape[0]:
        counts = xi.sum(axis=0)
        totals = counts.sum(axis=1)
        for j in range(K):
            if totals[j] < EMPTY_COMPONENT_TOL:
                notes.append(f"transition row {j + 1} has no expected visits; kept previous row")
                continue
            row = counts[j] / totals[j]
            trans[j] = row / row.sum()

    rho = gamma[0] if cfg.rho_update == "first" else gamma.mean(axis=0)
    rho = rho / rho.sum()
    return HmMarParams(coeffs=coeffs, sigmas=sigmas, rho=rho, trans=trans)


def ols_ar(series: TimeSeries | ArrayLike, p: int) -> tuple[NDArray[np.float64], float, NDArray[np.float64]]:
    """Least-squares AR(p) fit with intercept.

    Returns ``(coeffs, sigma_mle, std_errors)``; ``sigma_mle`` divides the
    residual sum of squares by the number of fitted points.
    """
    series = as_series(series)
    X, y = series.design(p)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    rss = float(resid @ resid)
    n = y.size
    sigma = math.sqrt(rss / n)
    dof = n - (p + 1)
    s2 = rss / dof if dof > 0 else rss / n
    try:
        se = np.sqrt(np.clip(np.diag(s2 * np.linalg.pinv(X.T @ X)), 0.0, None))
    except np.linalg.LinAlgError:
        se = np.zeros(p + 1)
    return coef, sigma, se


def init_params(series: TimeSeries | ArrayLike, K: int, p: int, rng: np.random.Generator) -> HmMarParams:
    """Random starting point around the global least-squares AR(p) fit.

    ``A_k`` is the OLS vector plus Gaussian noise with half the OLS
    standard errors as scale, ``sigma_k`` is the residual scale times a
    factor in ``[0.5, 2]``, ``rho`` is uniform and each transition row is a
    flat Dirichlet draw averaged with the uniform row. ``K = 1`` returns the
    OLS fit unperturbed.
    """
    series = as_series(series)
    coef, sigma, se = ols_ar(series, p)
    if not sigma > 0:
        sigma = math.sqrt(max(float(np.var(series.values)), 1e-300)) or 1.0
    if K == 1:
        return HmMarParams(coeffs=coef[None, :], sigmas=[sigma], rho=[1.0], trans=[[1.0]])
    coeffs = coef[None, :] + rng.normal(size=(K, p + 1)) * (0.5 * se)
    sigmas = sigma * rng.uniform(0.5, 2.0, size=K)
    trans = 0.5 * rng.dirichlet(np.ones(K), size=K) + 0.5 / K
    trans /= trans.sum(axis=1, keepdims=True)
    return HmMarParams(coeffs=coeffs, sigmas=sigmas, rho=np.full(K, 1.0 / K), trans=trans)


def _check_fit_args(series: TimeSeries, K: int, p: int) -> None:
    if K < 1 or p < 0:
        raise InvalidInputError(f"need K >= 1 and p >= 0, got K={K}, p={p}")
    if series.T < p + 2:
        raise InvalidInputError(f"need at least p+2={p + 2} observations, got T={series.T}")


def run_em(series: TimeSeries | ArrayLike, init: HmMarParams, cfg: FitConfig = FitConfig()) -> FitReport:
    """EM iterations from a given starting point (a single restart).

    ``loglik_trace[i]`` is the log-likelihood after ``i`` M-steps and the
    returned parameters are those whose log-likelihood ends the trace.
    Stops when ``|delta loglik| / (1 + |loglik|) < cfg.tol``.
    """
    series = as_series(series)
    _check_fit_args(series, init.K, init.p)
    params = init
    notes: list[str] = []
    post = e_step(series, params)
    trace = [post.loglik]
    converged = False
    iterations = 0
    for _ in range(cfg.max_iters):
        params = m_step(series, post, params, cfg, notes)
        iterations += 1
        post = e_step(series, params)
        trace.append(post.loglik)
        if abs(trace[-1] - trace[-2]) / (1.0 + abs(trace[-1])) < cfg.tol:
            converged = True
            break
    return FitReport(
        params=params,
        loglik_trace=trace,
        converged=converged,
        iterations=iterations,
        restart_logliks=[trace[-1]],
        warnings=list(dict.fromkeys(notes)),
    )


def fit(series: TimeSeries | ArrayLike, K: int, p: int, cfg: FitConfig = FitConfig(),
        init: HmMarParams | None = None, n_jobs: int = 1) -> FitReport:
    """Fit HM-MAR(K, p) by EM, keeping the best of ``cfg.n_restarts`` runs.

    Restart ``r`` draws its starting point from the ``r``-th child of
    ``SeedSequence(cfg.seed)``, so results do not depend on ``n_jobs``.
    Ties in the final log-likelihood go to the lower restart index. When
    ``init`` is given, a single run starts from it.

    Raises
    ------
    FitFailedError
        If every restart hit a numerical failure.
    """
    series = as_series(series)
    _check_fit_args(series, K, p)
    if init is not None:
        if (init.K, init.p) != (K, p):
            raise InvalidInputError(f"initial model is ({init.K}, {init.p}), expected ({K}, {p})")
        return run_em(series, init, cfg)

    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_restarts)

    def one(r: int) -> FitReport | str:
        start = init_params(series, K, p, np.random.default_rng(seeds[r]))
        try:
            return run_em(series, start, cfg)
        except NumericalFailureError as exc:
            return str(exc)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            runs = list(pool.map(one, range(cfg.n_restarts)))
    else:
        runs = [one(r) for r in range(cfg.n_restarts)]

    finals = [run.loglik if isinstance(run, FitReport) else -math.inf for run in runs]
    if all(isinstance(run, str) for run in runs):
        raise FitFailedError(runs)
    best = max(range(len(runs)), key=lambda r: (finals[r], -r))
    report = runs[best]
    report.restart_logliks = finals
    report.best_restart = best
    for r, run in enumerate(runs):
        if isinstance(run, str):
            report.warnings.append(f"restart {r} failed: {run}")
        log.debug("restart %d: loglik=%s", r, finals[r])
    return report
