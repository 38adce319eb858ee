"""Multi-task ResNeXt-style 1-D CNN for daily market series, in plain numpy."""
from .data import AugmentPolicy, Dataset, build_dataset, load_macro, load_prices
from .evaluation import MetricsReport, accuracy, evaluate, evaluate_arrays, macro_f1, regression_metrics
from .model import ExtractorConfig, MultiTaskNet, StageConfig, TaskSpec, build_model, multi_task_loss
from .nn import ConvSpec, Rng, conv1d_grouped, finite_difference_check
from .training import Trainer, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AugmentPolicy",
    "ConvSpec",
    "Dataset",
    "ExtractorConfig",
    "MetricsReport",
    "MultiTaskNet",
    "Rng",
    "StageConfig",
    "TaskSpec",
    "TrainConfig",
    "Trainer",
    "accuracy",
    "build_dataset",
    "build_model",
    "conv1d_grouped",
    "evaluate",
    "evaluate_arrays",
    "finite_difference_check",
    "load_checkpoint",
    "load_macro",
    "load_prices",
    "macro_f1",
    "multi_task_loss",
    "regression_metrics",
    "save_checkpoint",
    "train",
]
