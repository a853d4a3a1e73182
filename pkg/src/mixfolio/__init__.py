"""Return forecasting that blends historical and market-implied information.

Asset returns follow a Gaussian mixture over market states; the weights on
the states are estimated three ways: from return history alone (backward),
by inverting the observed market portfolio of a heterogeneous market
(forward), and as the posterior mode combining both (combined).  The
package also ships the Monte Carlo market used to validate the estimators
and a mean-variance backtesting pipeline with transaction costs.
"""

from .gmm import (
    EMFit,
    GaussianComponent,
    MixtureModel,
    MixtureWeights,
    PriorSpec,
    em_fit_weights,
    mixture_density,
    mixture_from_dict,
    mixture_moments,
    mixture_to_dict,
    sample_returns,
)
from .equilibrium import (
    EquilibriumObservation,
    InvestorHolding,
    MarketParams,
    WealthState,
    clear_market,
    g_forward,
    mv_unconstrained,
    noise_sigma_from_ci,
    sample_noise,
    update_wealth,
)
from .estimator import (
    EstimationProblem,
    EstimationResult,
    LinearCase,
    estimate_moments,
    eval_F1,
    eval_F2,
    make_linear_case,
    posterior_linear,
    solve_backward,
    solve_combined,
    solve_combined_linear,
    solve_forward,
)

__version__ = "0.1.0"

__all__ = [
    "EMFit",
    "EquilibriumObservation",
    "EstimationProblem",
    "EstimationResult",
    "GaussianComponent",
    "InvestorHolding",
    "LinearCase",
    "MarketParams",
    "MixtureModel",
    "MixtureWeights",
    "PriorSpec",
    "WealthState",
    "clear_market",
    "em_fit_weights",
    "estimate_moments",
    "eval_F1",
    "eval_F2",
    "g_forward",
    "make_linear_case",
    "mixture_density",
    "mixture_from_dict",
    "mixture_moments",
    "mixture_to_dict",
    "mv_unconstrained",
    "noise_sigma_from_ci",
    "posterior_linear",
    "sample_noise",
    "sample_returns",
    "solve_backward",
    "solve_combined",
    "solve_combined_linear",
    "solve_forward",
    "update_wealth",
    "__version__",
]
