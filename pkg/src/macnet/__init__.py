"""Multi-scale atrous convolutional classifier built on a small numpy autodiff core."""

from .errors import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    DegenerateWeightsError,
    DimensionError,
    GradientError,
    ImageDecodeError,
    LabelError,
    MacNetError,
    ManifestError,
    ModeError,
    NumericFault,
    UnsupportedFormatError,
)
from .metrics import EvalReport, compute_class_weights, compute_report, top_k_accuracy, weighted_cross_entropy
from .model import MacNetConfig, MacNetModel, init_parameters, load_model, macnet_forward, predict, save_model
from .ops import Conv2dSpec, conv2d
from .tensor import GradTape, Tensor, backward, no_grad, precision
from .train import LrSchedule, OptimizerState, TrainRunConfig, evaluate, lr_at, resume, sgd_step, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigurationError", "ContractError", "Conv2dSpec", "DegenerateWeightsError",
    "DimensionError", "EvalReport", "GradTape", "GradientError", "ImageDecodeError", "LabelError", "LrSchedule",
    "MacNetConfig", "MacNetError", "MacNetModel", "ManifestError", "ModeError", "NumericFault", "OptimizerState",
    "Tensor", "TrainRunConfig", "UnsupportedFormatError", "backward", "compute_class_weights", "compute_report",
    "conv2d", "evaluate", "init_parameters", "load_model", "lr_at", "macnet_forward", "no_grad", "precision",
    "predict", "resume", "save_model", "sgd_step", "top_k_accuracy", "train", "weighted_cross_entropy",
]
