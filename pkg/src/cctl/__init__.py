"""Cross-domain CTR transfer: companion towers, learned source-sample weighting, and contrastive alignment."""

from .config import ExperimentConfig, load_config
from .data import SynthConfig, generate_synthetic
from .evalmetrics import auc, logloss
from .experiment import RunReport, run_experiment, sweep, train_baseline

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "RunReport", "SynthConfig", "auc", "generate_synthetic", "load_config", "logloss",
    "run_experiment", "sweep", "train_baseline",
]
