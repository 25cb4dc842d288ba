"""Synthetic HM-MAR sample paths with known hidden states.

Random stream contract: ``numpy.random.default_rng(seed)`` (PCG64). The
generator first draws ``n`` uniforms that drive the hidden chain by
inverse-CDF sampling, then ``n`` standard normals for the noise, where
``n = warmup + T - p`` is the number of generated observations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from hmmar.errors import InvalidInputError, SimulationDivergedError
from hmmar.model import HmMarParams, TimeSeries


@dataclass(frozen=True)
class SimSpec:
    """What to simulate.

    The ``p`` initial values precede the generated observations; the first
    generated observation has its hidden state drawn from ``rho``. The
    first ``warmup`` generated values (and their states) are discarded.
    With ``warmup=0`` the returned series starts with the initial values.
    """

    params: HmMarParams
    T: int
    seed: int = 0
    warmup: int = 200
    initial_values: Sequence[float] | None = None

    def __post_init__(self):
        p = self.params.p
        if self.T < p + 2:
            raise InvalidInputError(f"T must be at least p+2={p + 2}, got {self.T}")
        if self.warmup < 0:
            raise InvalidInputError("warmup must be non-negative")
        if self.initial_values is not None and len(self.initial_values) != p:
            raise InvalidInputError(f"need exactly p={p} initial values, got {len(self.initial_values)}")


def _draw_chain(u: NDArray, rho: NDArray, trans: NDArray) -> NDArray[np.int64]:
    K = rho.size
    cum_rho = np.cumsum(rho)
    cum_trans = np.cumsum(trans, axis=1)
    z = np.empty(u.size, dtype=np.int64)
    state = min(int(np.searchsorted(cum_rho, u[0], side="right")), K - 1)
    z[0] = state
    for i in range(1, u.size):
        state = min(int(np.searchsorted(cum_trans[state], u[i], side="right")), K - 1)
        z[i] = state
    return z


def simulate_path(spec: SimSpec) -> tuple[TimeSeries, NDArray[np.int64]]:
    """Draw a series and its hidden path.

    Returns the series ``y_1..y_T`` and the 1-based states ``z_{p+1}..z_T``.

    Raises
    ------
    SimulationDivergedError
        If the recursion produces a non-finite value; ``t`` on the error is
        the 1-based index among generated observations (warmup included).
    """
    params = spec.params
    p = params.p
    n = spec.warmup + spec.T - p
    rng = np.random.default_rng(spec.seed)
    u = rng.random(n)
    eps = rng.standard_normal(n)
    z = _draw_chain(u, params.rho, params.trans)

    full = np.empty(p + n)
    full[:p] = 0.0 if spec.initial_values is None else np.asarray(spec.initial_values, dtype=float)
    coeffs = params.coeffs
    sigmas = params.sigmas
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n):
            k = z[i]
            v = coeffs[k, 0] + sigmas[k] * eps[i]
            for lag in range(1, p + 1):
                v += coeffs[k, lag] * full[p + i - lag]
            if not np.isfinite(v):
                raise SimulationDivergedError(
                    f"simulated value became non-finite at generated step {i + 1}; "
                    "AR coefficients are likely explosive", t=i + 1,
                )
            full[p + i] = v
    series = TimeSeries(full[spec.warmup:])
    return series, z[spec.warmup:] + 1


def empirical_transition_counts(path: Sequence[int], K: int | None = None) -> NDArray[np.int64]:
    """Count matrix ``C[j, k]`` of ``j -> k`` moves in a 1-based state path."""
    z = np.asarray(path, dtype=np.int64)
    if z.size < 2:
        raise InvalidInputError("need a path of length >= 2")
    if np.any(z < 1):
        raise InvalidInputError("states are 1-based")
    K = int(z.max()) if K is None else K
    flat = np.bincount((z[:-1] - 1) * K + (z[1:] - 1), minlength=K * K)
    return flat.reshape(K, K)
