"""Long-term causal effect estimation from panels with monotone missing outcomes."""

__version__ = "0.1.0"

from .dataset import DatasetError, GroundTruth, LongTermDataset, load_csv, validate_monotone, write_csv
from .dgp import DgpConfig, Style, simulate
from .estimators import METHODS, EffectEstimate, EstimatorConfig, estimate
from .metrics import aggregate, eps_ate, eps_cate, paired_t_test
from .nuisance import NuisanceScores, fit_nuisances

__all__ = [
    "__version__",
    "DatasetError",
    "GroundTruth",
    "LongTermDataset",
    "load_csv",
    "write_csv",
    "validate_monotone",
    "DgpConfig",
    "Style",
    "simulate",
    "METHODS",
    "EffectEstimate",
    "EstimatorConfig",
    "estimate",
    "aggregate",
    "eps_ate",
    "eps_cate",
    "paired_t_test",
    "NuisanceScores",
    "fit_nuisances",
]
