"""Segmentation + enhancement preprocessing defenses against FGSM/PGD, at desk scale."""

from .attacks import AttackConfig, fgsm, pgd
from .enhance import EnhanceConfig, enhance
from .errors import ConfigError, DataError, DimensionError, ParseError, SepipeError, StateError
from .evaluate import Pipeline, evaluate, rate_of_reduction
from .image import Image
from .models import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .segment import Mask, heuristic_segment
from .sweep import SweepGrid, standard_grid
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "ConfigError", "DataError", "DimensionError", "EnhanceConfig", "Image", "Mask",
    "ModelConfig", "ParseError", "Pipeline", "SepipeError", "StateError", "TrainConfig", "build_model",
    "enhance", "evaluate", "fgsm", "heuristic_segment", "load_checkpoint", "pgd", "rate_of_reduction",
    "save_checkpoint", "standard_grid", "SweepGrid", "train",
]
