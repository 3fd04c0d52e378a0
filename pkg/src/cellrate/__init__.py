"""Fairness-scheduled ergodic rates of cooperative multi-cell MIMO downlinks.

The package evaluates per-user rates in the large-system limit (many
antennas and users per group) and checks them against finite-size Monte
Carlo simulation.
"""

__version__ = "0.1.0"

from .errors import CellrateError, ConfigError, ConvergenceError
from .fairness import FairnessResult, Utility, solve_fairness, solve_system
from .geometry import (ClusterProblem, PathlossModel, Scenario, all_cluster_problems,
                       build_hex7_scenario, build_linear_scenario, gain_matrix)
from .limitcore import (DualVars, PowerAllocation, RatePoint, Tolerances, Weights, group_rates,
                        optimize_powers_alg1, weighted_avg_sum_rate)

__all__ = [
    "CellrateError", "ConfigError", "ConvergenceError", "FairnessResult", "Utility",
    "solve_fairness", "solve_system", "ClusterProblem", "PathlossModel", "Scenario",
    "all_cluster_problems", "build_hex7_scenario", "build_linear_scenario", "gain_matrix",
    "DualVars", "PowerAllocation", "RatePoint", "Tolerances", "Weights", "group_rates",
    "optimize_powers_alg1", "weighted_avg_sum_rate", "__version__",
]
