"""Multi-modal novel view synthesis through a shared feature-volume representation."""

from .config import MODALITIES, RunConfig, load_config
from .errors import ConfigurationError, CrossModalError, DataError, NumericalError, UsageError
from .estimator import CrossModalityDiffusion, Query
from .nn import ModuleRegistry

__all__ = [
    "MODALITIES",
    "ConfigurationError",
    "CrossModalError",
    "CrossModalityDiffusion",
    "DataError",
    "ModuleRegistry",
    "NumericalError",
    "Query",
    "RunConfig",
    "UsageError",
    "load_config",
]
