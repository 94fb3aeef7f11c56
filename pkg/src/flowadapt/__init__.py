"""Flow-based domain-shift detection and test-time adaptation at desk scale.

A classifier's intermediate features are modeled with a normalizing flow
trained on source data; at test time the flow's negative log-likelihood
scores domain shift and its gradient adapts the feature extractor, batch by
batch, with the classifier head and the flow frozen.
"""

from .adapt import AdaptConfig, adapt_batch, predict_with_adaptation, shift_score, take_snapshot
from .backbone import Backbone
from .data import CorruptionSpec, LabeledDataset, apply_corruption, generate_source, natural_shift
from .flow import CouplingLayer, FlowModel
from .tensor import Tensor, backward, finite_difference_gradient
from .train import SGD, TrainConfig, train_flow, train_joint, train_source

__all__ = [
    "AdaptConfig", "Backbone", "CorruptionSpec", "CouplingLayer", "FlowModel",
    "LabeledDataset", "SGD", "Tensor", "TrainConfig", "adapt_batch",
    "apply_corruption", "backward", "finite_difference_gradient",
    "generate_source", "natural_shift", "predict_with_adaptation",
    "shift_score", "take_snapshot", "train_flow", "train_joint", "train_source",
]

__version__ = "0.1.0"
