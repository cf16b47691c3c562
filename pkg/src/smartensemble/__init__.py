"""Per-sample sub-ensemble selection trained end to end through a top-k knapsack layer.

Modules
-------
autodiff   reverse-mode tape over numpy arrays
nn         MLPs, optimisers, JSON checkpoints
knapsack   top-k selection and its perturbed-optimizer Jacobian
ensemble   prediction matrices, smoothed voting, baseline rules
data       IDX files, specialised splits, synthetic task
training   agent / selector training, evaluation, k-sweeps
config     experiment configuration
cli        the ``smartensemble`` command
"""

from .config import ExperimentConfig, config_from_dict, validate_config
from .ensemble import (
    AgentModel,
    baseline_majority_vote,
    baseline_random_selection,
    baseline_unweighted_average,
    collect_predictions,
    mask_and_vote,
    predict_class,
)
from .knapsack import (
    KnapsackConfig,
    knapsack_layer,
    normalize_scores,
    perturbed_jacobian,
    smoothed_forward,
    topk_select,
)

__version__ = "0.1.0"

__all__ = [
    "AgentModel",
    "ExperimentConfig",
    "KnapsackConfig",
    "baseline_majority_vote",
    "baseline_random_selection",
    "baseline_unweighted_average",
    "collect_predictions",
    "config_from_dict",
    "knapsack_layer",
    "mask_and_vote",
    "normalize_scores",
    "perturbed_jacobian",
    "predict_class",
    "smoothed_forward",
    "topk_select",
    "validate_config",
]
