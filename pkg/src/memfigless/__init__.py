"""Memory right-sizing for serverless functions.

Profile a function across payloads and memory sizes, fit a multi-output
random forest to the records, then choose a memory per request from the
predicted cost/time Pareto front.
"""

from .domain import CostModel, InvocationRecord, SLOConstraints, compute_cost, derive_default_constraints
from .forest import Forest, Hyperparams, fit_forest, grid_search, load_model, save_model, train
from .manager import ManagerConfig, MetricsStore, ResourceManager, fallback_config
from .optimizer import Candidate, SelectionResult, enumerate_candidates, pareto_front, select_configuration
from .profiler import Dataset, ProfilePlan, run_profile
from .sim import FunctionModel, SimBackend, optimal_config_oracle, preset, preset_models

__version__ = "0.1.0"

__all__ = [
    "Candidate",
    "CostModel",
    "Dataset",
    "Forest",
    "FunctionModel",
    "Hyperparams",
    "InvocationRecord",
    "ManagerConfig",
    "MetricsStore",
    "ProfilePlan",
    "ResourceManager",
    "SLOConstraints",
    "SelectionResult",
    "SimBackend",
    "compute_cost",
    "derive_default_constraints",
    "enumerate_candidates",
    "fallback_config",
    "fit_forest",
    "grid_search",
    "load_model",
    "optimal_config_oracle",
    "pareto_front",
    "preset",
    "preset_models",
    "run_profile",
    "save_model",
    "select_configuration",
    "train",
]
