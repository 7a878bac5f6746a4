"""Adaptive intervention engine and simulator."""

from .deep_bandits import EkfBelief, FeatureExtractor, NeuralLinearPolicy, NigHead, ReplayQueue
from .experiments import ExperimentDesign, assign, estimate_effect, mrt_randomize
from .linear_bandits import LinearBanditState, PosteriorBelief, linucb_select, linucb_update, ts_select, ts_update
from .persistence import load_checkpoint, save_checkpoint
from .rmab import TwoStateMdp, allocate, check_indexability, equitable_allocate, whittle_index
from .simulator import LinearEnvSpec, RmabEnvSpec, make_policy, replicate, run_bandit_episode, run_rmab_episode
from .survival import SurvivalRecord, fit_discrete_hazard, fit_kaplan_meier, predict_survival, risk_rank
from .traits import ContextSchema, TraitStore, build_context, ingest_event

__all__ = [
    "EkfBelief",
    "FeatureExtractor",
    "NeuralLinearPolicy",
    "NigHead",
    "ReplayQueue",
    "ExperimentDesign",
    "assign",
    "estimate_effect",
    "mrt_randomize",
    "LinearBanditState",
    "PosteriorBelief",
    "linucb_select",
    "linucb_update",
    "ts_select",
    "ts_update",
    "load_checkpoint",
    "save_checkpoint",
    "TwoStateMdp",
    "allocate",
    "check_indexability",
    "equitable_allocate",
    "whittle_index",
    "LinearEnvSpec",
    "RmabEnvSpec",
    "make_policy",
    "replicate",
    "run_bandit_episode",
    "run_rmab_episode",
    "SurvivalRecord",
    "fit_discrete_hazard",
    "fit_kaplan_meier",
    "predict_survival",
    "risk_rank",
    "ContextSchema",
    "TraitStore",
    "build_context",
    "ingest_event",
]

__version__ = "0.1.0"
