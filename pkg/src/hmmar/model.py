"""HM-MAR(K, p) parameters, observation model and one-step predictive distribution.

Observations are 1-indexed ``y_1..y_T``. The hidden chain and the first
modelled emission start at ``t = p + 1``; ``rho`` is the distribution of
``Z_{p+1}`` given ``y_1..y_p`` and ``trans[i, j] = P(Z_t = j | Z_{t-1} = i)``.
Given ``Z_t = k``::

    y_t = x_t' A_k + sigma_k * eps_t,    x_t = (1, y_{t-1}, ..., y_{t-p})

Component and state indices are 0-based in arrays and 1-based in messages.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.sparse.csgraph import connected_components

from hmmar.errors import InsufficientHistoryError, InvalidInputError, NumericalFailureError

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
PROB_TOL = 1e-12


def _readonly(a: NDArray) -> NDArray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeSeries:
    """Ordered scalar observations ``y_1..y_T``."""

    values: NDArray[np.float64]

    def __post_init__(self) -> None:
        try:
            v = np.array(self.values, dtype=float).reshape(-1)
        except (TypeError, ValueError) as exc:
            raise InvalidInputError(f"observations are not numeric: {exc}") from None
        if v.size == 0:
            raise InvalidInputError("time series is empty")
        bad = np.flatnonzero(~np.isfinite(v))
        if bad.size:
            raise InvalidInputError(f"non-finite observation at t={bad[0] + 1}")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def T(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return self.values.size

    def y(self, t: int) -> float:
        """Observation at 1-based time ``t``."""
        return float(self.values[t - 1])

    def regressor(self, t: int, p: int) -> NDArray[np.float64]:
        """Regressor ``(1, y_{t-1}, ..., y_{t-p})`` for the emission at time ``t``.

        ``t`` may be ``T + 1`` (the one-step-ahead forecast slot).
        """
        if t <= p:
            raise InsufficientHistoryError(f"t={t} has fewer than p={p} lagged observations")
        if t > self.T + 1:
            raise InvalidInputError(f"t={t} is beyond the forecast slot T+1={self.T + 1}")
        x = np.empty(p + 1)
        x[0] = 1.0
        x[1:] = self.values[t - p - 1:t - 1][::-1]
        return x

    def design(self, p: int) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
        """Regressor matrix and targets for ``t = p+1..T``.

        Returns ``X`` of shape ``(T - p, p + 1)`` whose row ``s`` is the
        regressor of ``y_{p+1+s}``, and the target vector ``y_{p+1..T}``.
        """
        T = self.T
        if T <= p:
            raise InsufficientHistoryError(f"need more than p={p} observations, got T={T}")
        X = np.ones((T - p, p + 1))
        for lag in range(1, p + 1):
            X[:, lag] = self.values[p - lag:T - lag]
        return X, np.array(self.values[p:])


def as_series(data: TimeSeries | ArrayLike) -> TimeSeries:
    return data if isinstance(data, TimeSeries) else TimeSeries(data)


def n_params(K: int, p: int) -> int:
    """Stored parameter count ``K**2 + (p + 2) * K``."""
    return K * K + (p + 2) * K


def n_free_params(K: int, p: int) -> int:
    """Parameter count net of the ``K`` row-sum constraints and the one on ``rho``."""
    return n_params(K, p) - K - 1


@dataclass(frozen=True, eq=False)
class HmMarParams:
    """Full HM-MAR(K, p) parameter set.

    Attributes
    ----------
    coeffs : ndarray, shape (K, p + 1)
        Row ``k`` is ``A_k = (a_0k, a_1k, ..., a_pk)``, intercept first.
    sigmas : ndarray, shape (K,)
        Component noise standard deviations.
    rho : ndarray, shape (K,)
        Distribution of the first hidden state ``Z_{p+1}``.
    trans : ndarray, shape (K, K)
        Row-stochastic transition matrix.
    strict : bool
        When False, zero ``sigmas`` are accepted. Only simulation can use
        such parameters; every density evaluation rejects them.
    """

    coeffs: NDArray[np.float64]
    sigmas: NDArray[np.float64]
    rho: NDArray[np.float64]
    trans: NDArray[np.float64]
    strict: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self) -> None:
        try:
            coeffs = np.array(self.coeffs, dtype=float, ndmin=2)
            sigmas = np.array(self.sigmas, dtype=float).reshape(-1)
            rho = np.array(self.rho, dtype=float).reshape(-1)
            trans = np.array(self.trans, dtype=float, ndmin=2)
        except (TypeError, ValueError) as exc:
            raise InvalidInputError(f"parameters are not numeric: {exc}") from None
        K = coeffs.shape[0]
        if coeffs.ndim != 2 or K < 1 or coeffs.shape[1] < 1:
            raise InvalidInputError(f"coeffs must be a non-empty K x (p+1) array, got shape {coeffs.shape}")
        if sigmas.shape != (K,) or rho.shape != (K,) or trans.shape != (K, K):
            raise InvalidInputError(
                f"inconsistent shapes: coeffs {coeffs.shape}, sigmas {sigmas.shape}, "
                f"rho {rho.shape}, trans {trans.shape}"
            )
        for name, arr in (("coeffs", coeffs), ("sigmas", sigmas), ("rho", rho), ("trans", trans)):
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} contains non-finite values")
        if self.strict and np.any(sigmas <= 0):
            raise InvalidInputError(f"sigmas must be positive, got {sigmas.tolist()}")
        if np.any(sigmas < 0):
            raise InvalidInputError(f"sigmas must be non-negative, got {sigmas.tolist()}")
        if np.any(rho < 0) or abs(rho.sum() - 1.0) > PROB_TOL:
            raise InvalidInputError(f"rho must be a probability vector, got {rho.tolist()}")
        if np.any(trans < 0):
            raise InvalidInputError("trans has negative entries")
        row_err = np.abs(trans.sum(axis=1) - 1.0)
        if np.any(row_err > PROB_TOL):
            i = int(np.argmax(row_err))
            raise InvalidInputError(f"trans row {i + 1} sums to {trans[i].sum()!r}, not 1")
        for name, arr in (("coeffs", coeffs), ("sigmas", sigmas), ("rho", rho), ("trans", trans)):
            object.__setattr__(self, name, _readonly(arr))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, HmMarParams):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in ("coeffs", "sigmas", "rho", "trans")
        )

    __hash__ = None

    @property
    def K(self) -> int:
        return self.coeffs.shape[0]

    @property
    def p(self) -> int:
        return self.coeffs.shape[1] - 1

    @property
    def n_params(self) -> int:
        return n_params(self.K, self.p)

    def replace(self, **changes: Any) -> "HmMarParams":
        fields = dict(coeffs=self.coeffs, sigmas=self.sigmas, rho=self.rho, trans=self.trans, strict=self.strict)
        fields.update(changes)
        return HmMarParams(**fields)

    def permute(self, order: Sequence[int]) -> "HmMarParams":
        """Relabel components so that new component ``i`` is old component ``order[i]``."""
        order = np.asarray(order, dtype=int)
        if sorted(order.tolist()) != list(range(self.K)):
            raise InvalidInputError(f"{order.tolist()} is not a permutation of 0..{self.K - 1}")
        return self.replace(
            coeffs=self.coeffs[order],
            sigmas=self.sigmas[order],
            rho=self.rho[order],
            trans=self.trans[np.ix_(order, order)],
        )

    def sorted_by_intercept(self) -> "HmMarParams":
        """Copy with components ordered by ascending intercept (display only)."""
        return self.permute(np.argsort(self.coeffs[:, 0], kind="stable"))

    def to_dict(self) -> dict[str, Any]:
        return {
            "K": self.K,
            "p": self.p,
            "coeffs": self.coeffs.tolist(),
            "sigmas": self.sigmas.tolist(),
            "rho": self.rho.tolist(),
            "trans": self.trans.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "HmMarParams":
        """Build from the JSON model schema; keys outside the schema are ignored."""
        if not isinstance(doc, Mapping):
            raise InvalidInputError("model document must be a JSON object")
        missing = [k for k in ("K", "p", "coeffs", "sigmas", "rho", "trans") if k not in doc]
        if missing:
            raise InvalidInputError(f"model document is missing keys: {', '.join(missing)}")
        K, p = doc["K"], doc["p"]
        if not isinstance(K, int) or isinstance(K, bool) or K < 1:
            raise InvalidInputError(f"K must be an integer >= 1, got {K!r}")
        if not isinstance(p, int) or isinstance(p, bool) or p < 0:
            raise InvalidInputError(f"p must be an integer >= 0, got {p!r}")
        coeffs = doc["coeffs"]
        if (not isinstance(coeffs, list) or len(coeffs) != K
                or any(not isinstance(row, list) or len(row) != p + 1 for row in coeffs)):
            raise InvalidInputError(f"coeffs must be a list of K={K} lists of length p+1={p + 1}")
        params = cls(coeffs=coeffs, sigmas=doc["sigmas"], rho=doc["rho"], trans=doc["trans"])
        if params.K != K:
            raise InvalidInputError(f"declared K={K} does not match the arrays (K={params.K})")
        return params

    def to_json(self, indent: int | None = 2) -> str:
        # repr-based float formatting round-trips every double exactly
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_json(cls, text: str) -> "HmMarParams":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"model file is not valid JSON: {exc}") from None
        return cls.from_dict(doc)


def _check_component(k: int, params: HmMarParams) -> None:
    if not 0 <= k < params.K:
        raise InvalidInputError(f"component index {k} out of range for K={params.K}")
    if params.sigmas[k] <= 0:
        raise InvalidInputError(f"component {k + 1} has non-positive sigma")


def log_emission_density(y: float, x: ArrayLike, k: int, params: HmMarParams) -> float:
    """Log of the Gaussian density of ``y`` with mean ``x' A_k`` and std ``sigma_k``.

    ``k`` is a 0-based component index.
    """
    _check_component(k, params)
    x = np.asarray(x, dtype=float)
    if x.shape != (params.p + 1,):
        raise InvalidInputError(f"regressor must have length p+1={params.p + 1}, got shape {x.shape}")
    if not (math.isfinite(y) and np.all(np.isfinite(x))):
        raise InvalidInputError("non-finite observation or regressor")
    sigma = float(params.sigmas[k])
    z = (y - float(x @ params.coeffs[k])) / sigma
    return -LOG_SQRT_2PI - math.log(sigma) - 0.5 * z * z


def emission_density(y: float, x: ArrayLike, k: int, params: HmMarParams) -> float:
    return math.exp(log_emission_density(y, x, k, params))


def log_emission_matrix(series: TimeSeries, params: HmMarParams) -> NDArray[np.float64]:
    """Log emission densities for all ``t = p+1..T`` and all components, shape ``(T - p, K)``."""
    if np.any(params.sigmas <= 0):
        raise InvalidInputError("emission densities need positive sigmas")
    X, y = series.design(params.p)
    # overflow shows up as -inf and is reported by the caller with its time index
    with np.errstate(over="ignore", invalid="ignore"):
        z = (y[:, None] - X @ params.coeffs.T) / params.sigmas
        return -LOG_SQRT_2PI - np.log(params.sigmas) - 0.5 * z * z


def _check_prob_vector(v: NDArray, K: int, what: str, tol: float = 1e-10) -> None:
    if v.shape != (K,):
        raise InvalidInputError(f"{what} must have length K={K}, got shape {v.shape}")
    if not np.all(np.isfinite(v)) or np.any(v < 0) or abs(v.sum() - 1.0) > tol:
        raise InvalidInputError(f"{what} is not a probability vector: {v.tolist()}")


def predictive_weights(filtered_prev: ArrayLike, params: HmMarParams) -> NDArray[np.float64]:
    """Mixing weights ``P(Z_t = h | y_1..y_{t-1}) = sum_m trans[m, h] * filtered_prev[m]``."""
    f = np.asarray(filtered_prev, dtype=float)
    _check_prob_vector(f, params.K, "filtered distribution")
    return f @ params.trans


def _weights_for(filtered_prev: ArrayLike | None, params: HmMarParams) -> NDArray[np.float64]:
    # Z_{p+1} has no predecessor; its weights are rho
    if filtered_prev is None:
        return np.array(params.rho)
    return predictive_weights(filtered_prev, params)


def predictive_density(
    y: float,
    t: int,
    series: TimeSeries | ArrayLike,
    filtered_prev: ArrayLike | None,
    params: HmMarParams,
) -> float:
    """One-step predictive mixture density of ``y`` at time ``t``.

    Parameters
    ----------
    y : float
        Point at which to evaluate the density.
    t : int
        1-based time index, ``p + 1 <= t <= T + 1``.
    series : TimeSeries or array_like
        Observations supplying the lagged regressor.
    filtered_prev : array_like or None
        ``P(Z_{t-1} = . | y_1..y_{t-1})``. Pass None at ``t = p + 1``,
        where the mixing weights are ``rho``.
    params : HmMarParams
    """
    series = as_series(series)
    x = series.regressor(t, params.p)
    w = _weights_for(filtered_prev, params)
    return float(sum(w[h] * emission_density(y, x, h, params) for h in range(params.K)))


def component_means(t: int, series: TimeSeries | ArrayLike, params: HmMarParams) -> NDArray[np.float64]:
    x = as_series(series).regressor(t, params.p)
    return params.coeffs @ x


def predictive_mean(
    t: int,
    series: TimeSeries | ArrayLike,
    filtered_prev: ArrayLike | None,
    params: HmMarParams,
) -> float:
    """Mean of the predictive mixture at time ``t``: ``sum_h w_h x_t' A_h``."""
    w = _weights_for(filtered_prev, params)
    return float(w @ component_means(t, series, params))


def stationary_distribution(params: HmMarParams, tol: float = 1e-10) -> tuple[NDArray[np.float64], bool]:
    """Invariant distribution ``mu`` of the hidden chain, ``mu' trans = mu'``.

    Returns ``(mu, unique)``. When the chain has several closed classes the
    solution is not unique; the returned ``mu`` is the long-run (Cesaro)
    distribution reached from a uniform start, so the identity matrix gives
    the uniform vector.

    Raises
    ------
    NumericalFailureError
        If the solution fails the balance check ``|mu' P - mu'| <= tol``.
    """
    P = np.asarray(params.trans)
    K = P.shape[0]
    n_closed, mu = _closed_class_mixture(P)
    resid = float(np.max(np.abs(mu @ P - mu)))
    if not np.all(np.isfinite(mu)) or resid > tol:
        raise NumericalFailureError(
            f"stationary distribution failed the balance check: residual {resid:.3e} > {tol:.1e} "
            f"(K={K}, closed classes={n_closed})"
        )
    return mu, n_closed == 1


def _stationary_irreducible(P: NDArray) -> NDArray:
    K = P.shape[0]
    A = np.vstack([P.T - np.eye(K), np.ones((1, K))])
    b = np.zeros(K + 1)
    b[-1] = 1.0
    mu = np.linalg.lstsq(A, b, rcond=None)[0]
    mu = np.clip(mu, 0.0, None)
    return mu / mu.sum()


def _closed_class_mixture(P: NDArray) -> tuple[int, NDArray]:
    K = P.shape[0]
    n_comp, labels = connected_components(P > 0, directed=True, connection="strong")
    closed = []
    for c in range(n_comp):
        members = labels == c
        if not np.any(P[np.ix_(members, ~members)] > 0):
            closed.append(np.flatnonzero(members))
    if len(closed) == 1 and closed[0].size == K:
        return 1, _stationary_irreducible(P)
    transient = np.setdiff1d(np.arange(K), np.concatenate(closed))
    mu = np.zeros(K)
    for cls in closed:
        sub = _stationary_irreducible(P[np.ix_(cls, cls)])
        # probability of absorption into this class from a uniform start
        hit = np.zeros(K)
        hit[cls] = 1.0
        if transient.size:
            Q = P[np.ix_(transient, transient)]
            r = P[np.ix_(transient, cls)].sum(axis=1)
            hit[transient] = np.linalg.solve(np.eye(transient.size) - Q, r)
        mu[cls] += hit.mean() * sub
    return len(closed), mu / mu.sum()
