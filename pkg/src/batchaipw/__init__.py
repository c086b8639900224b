"""Budgeted annotation planning and doubly-robust ATE estimation with missing outcomes."""

from .campaign import Campaign, CampaignConfig, FileOracle, SimulationOracle
from .crossfit import assign, fit_folded
from .data import BudgetSpec, ClipConfig, Dataset, DataError, load_dataset, save_dataset
from .design import (batch2_probability, continuous_allocation, global_allocation,
                     kernel_localized_propensity, per_arm_allocation, relative_efficiency)
from .estimator import EstimateReport, estimate_ate, estimate_with_external_weights
from .nuisance import NuisanceSpecs, fit_nuisances
from .sim import DgpSpec, budget_saved, generate, run_trials

__version__ = "0.1.0"

__all__ = [
    "BudgetSpec", "Campaign", "CampaignConfig", "ClipConfig", "DataError", "Dataset", "DgpSpec",
    "EstimateReport", "FileOracle", "NuisanceSpecs", "SimulationOracle", "assign",
    "batch2_probability", "budget_saved", "continuous_allocation", "estimate_ate",
    "estimate_with_external_weights", "fit_folded", "fit_nuisances", "generate",
    "global_allocation", "kernel_localized_propensity", "load_dataset", "per_arm_allocation",
    "relative_efficiency", "run_trials", "save_dataset",
]
