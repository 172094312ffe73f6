"""Deep variational information bottleneck for incomplete multi-view classification."""

from .data import MultiViewDataset, SynthConfig, load_dataset, synthesize_dataset
from .model import DeepIMVParams, ModelDims, forward, init_params, load_params, predict_proba, save_params
from .training import TrainConfig, train_deepimv

__version__ = "0.1.0"

__all__ = [
    "DeepIMVParams", "ModelDims", "MultiViewDataset", "SynthConfig", "TrainConfig",
    "forward", "init_params", "load_dataset", "load_params", "predict_proba", "save_params",
    "synthesize_dataset", "train_deepimv",
]
