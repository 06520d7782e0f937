"""Open-set recognition with a class-conditioned auto-encoder.

A closed-set encoder/classifier is trained first, then a FiLM-conditioned
decoder learns to reconstruct an input well only when conditioned on its own
class. Extreme-value fits of the match and non-match reconstruction errors
give the operating threshold that separates known from unknown inputs.
"""
from .checkpoint import load_checkpoint, save_checkpoint
from .data import LabeledDataset, SplitSpec, gen_toy, load_idx, read_csv, split_known_unknown
from .evt import ThresholdModel, compute_threshold
from .infer import OpenSetPrediction, batch_inference, k_inference
from .nets import NetworkDef, OpenSetModel
from .train import TrainConfig, collect_error_sets, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "LabeledDataset",
    "NetworkDef",
    "OpenSetModel",
    "OpenSetPrediction",
    "SplitSpec",
    "ThresholdModel",
    "TrainConfig",
    "batch_inference",
    "collect_error_sets",
    "compute_threshold",
    "gen_toy",
    "k_inference",
    "load_checkpoint",
    "load_idx",
    "read_csv",
    "save_checkpoint",
    "split_known_unknown",
    "train_stage1",
    "train_stage2",
]
