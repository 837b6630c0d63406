"""Multi-layer unsupervised domain adaptation on a float64 reverse-mode autodiff engine."""
from .data import Dataset, ShiftSpec, apply_shift, gen_blobs, make_domains
from .heads import DomainHead
from .nn import LayerSpec, Model, parse_layers
from .trainer import TrainConfig, TrainResult, estimate_w1, evaluate, select_model, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "DomainHead", "LayerSpec", "Model", "ShiftSpec", "TrainConfig", "TrainResult",
    "apply_shift", "estimate_w1", "evaluate", "gen_blobs", "make_domains", "parse_layers",
    "select_model", "train",
]
