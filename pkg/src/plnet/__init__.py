"""Progressive-learning U-Net (PL-Net) for binary segmentation, on numpy."""
from .arch_graph import NetworkConfig, build, count_parameters, describe
from .checkpoint import Checkpoint, build_model
from .data_io import Dataset, load_dataset, synth_generate
from .kernels import BACKEND
from .metrics import Confusion, Metrics, evaluate
from .model_runtime import Model, predict
from .nn_ops import Tape, Tensor, grad_check
from .training import AugmentConfig, TrainConfig, train_epl

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "AugmentConfig", "Checkpoint", "Confusion", "Dataset", "Metrics", "Model",
    "NetworkConfig", "Tape", "Tensor", "TrainConfig", "build", "build_model",
    "count_parameters", "describe", "evaluate", "grad_check", "load_dataset", "predict",
    "synth_generate", "train_epl",
]
