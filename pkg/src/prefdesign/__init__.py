"""Active preference-label selection for Bradley-Terry reward models.

Modules: ``core`` (types and Fisher algebra), ``estimator`` (MLE and
confidence widths), ``design`` (optimal designs and rounding),
``algorithms`` (query selection), ``complexity`` (bounds) and ``harness``
(experiments, CSV and CLI plumbing).
"""

from .core import (
    ArmSet,
    DegenerateInstanceError,
    DimensionError,
    FisherMatrix,
    InputDomainError,
    LabeledDataset,
    Link,
    PrefDesignError,
    SingularMatrixError,
    TrueModel,
    normalize_armset,
)
from .design import Design, DesignProblem, round_design, solve_design
from .estimator import MleConfig, mle_fit, mle_from_counts
from .algorithms import STRATEGIES, run_batched, run_exp_design, run_greedy, run_sequential
from .complexity import canonical_instance, lower_bound
from .harness import ExperimentConfig, run_canonical_separation, run_experiment

__version__ = "0.1.0"

__all__ = [
    "ArmSet", "DegenerateInstanceError", "DimensionError", "FisherMatrix", "InputDomainError",
    "LabeledDataset", "Link", "PrefDesignError", "SingularMatrixError", "TrueModel", "normalize_armset",
    "Design", "DesignProblem", "round_design", "solve_design",
    "MleConfig", "mle_fit", "mle_from_counts",
    "STRATEGIES", "run_batched", "run_exp_design", "run_greedy", "run_sequential",
    "canonical_instance", "lower_bound",
    "ExperimentConfig", "run_canonical_separation", "run_experiment",
]
