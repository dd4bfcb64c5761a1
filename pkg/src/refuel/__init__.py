"""Multitask representation learning in low-rank MDPs.

Upstream reward-free exploration learns a shared feature map from ``T`` tasks;
downstream offline (pessimistic) and online (optimistic) planners reuse it.
"""

from __future__ import annotations

from .envgen import FamilySpec, ModelClass, TaskFamily, generate_family, generate_model_classes
from .errors import (ConstantsError, GenerationError, InputError, MLEError, NumericalError, PersistIOError,
                     RefuelError, SchemaError, VersionError)
from .mdp import Policy, RewardTable, TabularLowRankMdp, optimal_dp, value_dp
from .offline import PessimismConfig, gen_offline_dataset, pevi
from .online import OnlineConfig, run_lsvi_ucb
from .upstream import HyperParams, LearnedRepresentation, run_refuel

__version__ = "0.1.0"

__all__ = [
    "ConstantsError", "FamilySpec", "GenerationError", "HyperParams", "InputError", "LearnedRepresentation",
    "MLEError", "ModelClass", "NumericalError", "OnlineConfig", "PersistIOError", "PessimismConfig", "Policy",
    "RefuelError", "RewardTable", "SchemaError", "TabularLowRankMdp", "TaskFamily", "VersionError",
    "gen_offline_dataset", "generate_family", "generate_model_classes", "optimal_dp", "pevi", "run_lsvi_ucb",
    "run_refuel", "value_dp",
]
