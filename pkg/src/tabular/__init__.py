"""Config-driven deep learning for tabular data.

The usual entry point is :class:`TabularModel`; configs live in
:mod:`tabular.config`, preprocessing in :mod:`tabular.data` and the networks
in :mod:`tabular.models`.
"""

from tabular.api import FitReport, TabularModel
from tabular.config import (
    AutoIntConfig,
    CategoryEmbeddingModelConfig,
    ConfigBundle,
    DataConfig,
    ExperimentConfig,
    NodeConfig,
    OptimizerConfig,
    TabNetModelConfig,
    TrainerConfig,
    load_bundle,
    validate,
)
from tabular.data import TableFrame, read_csv

__version__ = "0.1.0"

__all__ = [
    "TabularModel", "FitReport", "ConfigBundle", "validate", "load_bundle",
    "DataConfig", "CategoryEmbeddingModelConfig", "NodeConfig", "TabNetModelConfig", "AutoIntConfig",
    "TrainerConfig", "OptimizerConfig", "ExperimentConfig", "TableFrame", "read_csv",
]
