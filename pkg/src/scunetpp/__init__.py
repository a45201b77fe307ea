"""SCUNet++: Swin encoder, CNN bottleneck and dense skip connections for embolus segmentation.

Built on a small numpy reverse-mode autodiff core (:mod:`scunetpp.tensor`).
"""
from .data import PhantomParams, SegDataset, hu_window, phantom_dataset, split_cases, synth_case
from .metrics import MetricReport, dsc, evaluate_set, hd95
from .model import Model, ModelConfig, ablate, build_model, load_checkpoint, param_count, save_checkpoint
from .tensor import Tensor, finite_diff_grad, no_grad
from .trainer import Adam, TrainConfig, evaluate, seg_loss, train

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "MetricReport",
    "Model",
    "ModelConfig",
    "PhantomParams",
    "SegDataset",
    "Tensor",
    "TrainConfig",
    "ablate",
    "build_model",
    "dsc",
    "evaluate",
    "evaluate_set",
    "finite_diff_grad",
    "hd95",
    "hu_window",
    "load_checkpoint",
    "no_grad",
    "param_count",
    "phantom_dataset",
    "save_checkpoint",
    "seg_loss",
    "split_cases",
    "synth_case",
    "train",
]
