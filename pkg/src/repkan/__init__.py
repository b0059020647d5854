"""RepKAN: reparameterizable dual-path spline-convolution blocks for
multispectral image classification, with intrinsic interpretability
exports and symbolic distillation of the learned activations."""

from .data import (BandStats, MstdDataset, compute_band_stats, generate_synthetic,
                   mstd_read, mstd_write, normalize, planted_index, rule_accuracy,
                   split_dataset)
from .checkpoint import load_checkpoint, save_checkpoint
from .estimator import RepKanClassifier
from .interpret import (EnergyReport, ExpertFilter, energy_profile,
                        interaction_landscape, reasoning_map,
                        sample_curve_with_distribution, select_expert_filters)
from .layers import RepKanLayer
from .model import ModelConfig, RepKanModel
from .splines import SplineBank, SplineEdge, SplineGrid, edge_forward, sample_edge
from .symbolic import SymbolicFit, ablation_table, distill_edge, polyfit, r_squared
from .training import (AdamW, MetricsReport, Schedule, TrainConfig, evaluate,
                       lr_at, metrics_from_confusion, train_epochs)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "BandStats", "EnergyReport", "ExpertFilter", "MetricsReport",
    "ModelConfig", "MstdDataset", "RepKanClassifier", "RepKanLayer",
    "RepKanModel", "Schedule", "SplineBank", "SplineEdge", "SplineGrid",
    "SymbolicFit", "TrainConfig", "ablation_table", "compute_band_stats",
    "distill_edge", "edge_forward", "energy_profile", "evaluate",
    "generate_synthetic", "interaction_landscape", "load_checkpoint", "lr_at",
    "metrics_from_confusion", "mstd_read", "mstd_write", "normalize",
    "planted_index", "polyfit", "r_squared", "reasoning_map", "rule_accuracy",
    "sample_curve_with_distribution", "sample_edge", "save_checkpoint",
    "select_expert_filters", "split_dataset", "train_epochs",
]
