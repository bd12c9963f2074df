"""Bayesian neural networks with per-observation latent inputs.

Mean-field variational inference with constrained latent posteriors,
non-identifiability demonstrations, and an evaluation harness.
"""

__version__ = "0.1.0"

from .data import DataSet, gen_synthetic, load_csv
from .diffcore import Architecture
from .exceptions import ConfigError, CsvParseError, DivergenceError
from .metrics import MetricsReport, compute_report
from .model import PriorConfig
from .ncai import NcaiConfig, map_estimate, ncai_objective
from .train import TrainConfig, train, train_restarts
from .vi import MeanFieldPosterior, elbo

__all__ = [
    "Architecture",
    "ConfigError",
    "CsvParseError",
    "DataSet",
    "DivergenceError",
    "MeanFieldPosterior",
    "MetricsReport",
    "NcaiConfig",
    "PriorConfig",
    "TrainConfig",
    "__version__",
    "compute_report",
    "elbo",
    "gen_synthetic",
    "load_csv",
    "map_estimate",
    "ncai_objective",
    "train",
    "train_restarts",
]
