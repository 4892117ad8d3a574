"""Long-tailed, noisy-label image classification laboratory.

A from-scratch numpy network trained on synthetic long-tailed glyph data
with injected label noise, plus the full cleaning, rebalancing, test-time
augmentation and ensembling toolkit around it.
"""

__version__ = "0.1.0"

from .cleanse import CleaningConfig, iterative_clean, select_noisy
from .decouple import RebalanceConfig, grid_search_tau, retrain_classifier, tau_normalize
from .ensemble import EvalReport, PredictionRecord, eval_report, mean_class_error_rate
from .estimator import TailNetClassifier
from .exceptions import ConfigError, TailforgeError
from .imageops import AugmentConfig, TtaConfig
from .nnkernel import ModelParams
from .optim import OptimConfig
from .runner import ExperimentConfig, load_config, run_experiment, run_ladder, standard_config
from .sampling import SamplerKind
from .synthbench import Dataset, DatasetSpec, gen_dataset

__all__ = [
    "AugmentConfig",
    "CleaningConfig",
    "ConfigError",
    "Dataset",
    "DatasetSpec",
    "EvalReport",
    "ExperimentConfig",
    "ModelParams",
    "OptimConfig",
    "PredictionRecord",
    "RebalanceConfig",
    "SamplerKind",
    "TailNetClassifier",
    "TailforgeError",
    "TtaConfig",
    "eval_report",
    "gen_dataset",
    "grid_search_tau",
    "iterative_clean",
    "load_config",
    "mean_class_error_rate",
    "retrain_classifier",
    "run_experiment",
    "run_ladder",
    "select_noisy",
    "standard_config",
    "tau_normalize",
]
