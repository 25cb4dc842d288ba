"""Hidden Markov mixture autoregressive (HM-MAR) models: simulation, EM fitting, forecasting."""

from hmmar.em import FitConfig, FitReport, e_step, expected_complete_loglik, fit, init_params, m_step, ols_ar, run_em
from hmmar.errors import (
    BudgetExceededError,
    FitFailedError,
    HmMarError,
    InsufficientHistoryError,
    InvalidInputError,
    NumericalFailureError,
    SimulationDivergedError,
)
from hmmar.forward_backward import (
    FbPass,
    Posteriors,
    backward,
    decode_map_path,
    filtered,
    forward,
    forward_backward,
    posteriors,
)
from hmmar.model import (
    HmMarParams,
    TimeSeries,
    component_means,
    emission_density,
    log_emission_density,
    n_free_params,
    n_params,
    predictive_density,
    predictive_mean,
    predictive_weights,
    stationary_distribution,
)
from hmmar.simulate import SimSpec, empirical_transition_counts, simulate_path

__version__ = "0.1.0"
