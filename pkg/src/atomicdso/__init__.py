"""Dynamic system optimal assignment as a game between atomic users.

Newell car-following network loading, marginal-cost utilities, response
dynamics and exact Markov-chain checks for small instances.
"""

__version__ = "0.1.0"

from .network import (  # noqa: E402
    NULL_ROUTE, Link, Network, RouteSet, Scenario, ScenarioError, bundled_scenario,
    derived_link_params, enumerate_routes, load_scenario, parse_scenario, scale_document,
)
from .loading import GridlockError, LoadingResult, load  # noqa: E402
from .game import (  # noqa: E402
    EPS_U, Game, TollSchedule, derive_tolls, dso_utility, fcp_utility, is_nash,
    potential_identity_check, total_cost,
)
from .dynamics import (  # noqa: E402
    BetaSchedule, beta_schedule, best_response_step, better_response_step, build_chain_matrix,
    logit_step, scrambling_exponent, stationary_distribution,
)
from .algorithms import (  # noqa: E402
    RunConfig, check_sbpr1, departure_order_equilibration, run_deterministic, run_stochastic,
)

__all__ = [
    "NULL_ROUTE", "Link", "Network", "RouteSet", "Scenario", "ScenarioError", "bundled_scenario",
    "derived_link_params", "enumerate_routes", "load_scenario", "parse_scenario", "scale_document",
    "GridlockError", "LoadingResult", "load",
    "EPS_U", "Game", "TollSchedule", "derive_tolls", "dso_utility", "fcp_utility", "is_nash",
    "potential_identity_check", "total_cost",
    "BetaSchedule", "beta_schedule", "best_response_step", "better_response_step", "build_chain_matrix",
    "logit_step", "scrambling_exponent", "stationary_distribution",
    "RunConfig", "check_sbpr1", "departure_order_equilibration", "run_deterministic", "run_stochastic",
]
