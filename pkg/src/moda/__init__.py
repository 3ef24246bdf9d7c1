"""Activation-driven modular training of small neural networks.

Train an n-class classifier whose per-layer activation patterns are
shaped toward class-wise modularity, decompose it into per-class weight
modules by activation frequency, recompose subsets into smaller k-class
models without fine-tuning, and replace weak class outputs via a trained
adaptation layer.
"""

from .autograd import (ShapeError, Tensor, backward, conv2d, cosine_sim,
                       l1_sum, matmul, maxpool2x2, relu, softmax_cross_entropy,
                       spatial_mean)
from .compose import ComposedModel, MetricsReport, compose, module_metrics, reuse_accuracy
from .data import Dataset, Normalization, SplitPlan, make_blobs, read_idx, split_for_replacement
from .decompose import (FrequencyTable, ModuleSpec, compute_frequencies,
                        decompose_all, extract_module)
from .estimator import ModularClassifier
from .losses import (LossBreakdown, LossWeights, affinity_loss,
                     compactness_loss, dispersion_loss, unified_loss)
from .nn import (ActivationBatch, LayerSpec, Model, ModelSpec, build_model,
                 cnn_spec, count_flops, count_params, mlp_spec)
from .replace import (ReplacementAssembly, ReplacementOutcome, assemble_om,
                      evaluate_replacement, module_forward, train_adaptation)
from .serialize import load_checkpoint, load_module, save_checkpoint, save_module
from .training import TrainConfig, TrainLog, evaluate, sgd_nesterov_step, train

__version__ = "0.1.0"

__all__ = [
    "ActivationBatch", "ComposedModel", "Dataset", "FrequencyTable",
    "LayerSpec", "LossBreakdown", "LossWeights", "MetricsReport", "Model",
    "ModelSpec", "ModularClassifier", "ModuleSpec", "Normalization",
    "ReplacementAssembly", "ReplacementOutcome", "ShapeError", "SplitPlan",
    "Tensor", "TrainConfig", "TrainLog", "affinity_loss", "assemble_om",
    "backward", "build_model", "cnn_spec", "compactness_loss", "compose",
    "compute_frequencies", "conv2d", "cosine_sim", "count_flops",
    "count_params", "decompose_all", "dispersion_loss", "evaluate",
    "evaluate_replacement", "extract_module", "l1_sum", "load_checkpoint",
    "load_module", "make_blobs", "matmul", "maxpool2x2", "mlp_spec",
    "module_forward", "module_metrics", "read_idx", "relu", "reuse_accuracy",
    "save_checkpoint", "save_module", "sgd_nesterov_step",
    "softmax_cross_entropy", "spatial_mean", "split_for_replacement",
    "train", "train_adaptation", "unified_loss",
]
