"""Dynamic joint domain adaptation for speaker-invariant emotion features.

A small numpy implementation: a layer-level autodiff core, the feature
extractor / emotion classifier / discriminator model, marginal and
class-wise adversarial losses behind gradient reversal, the A-distance
balance factor, a synthetic multi-speaker benchmark and a LOSO harness.
"""

from .data import Dataset, SynthSpec, generate_synthetic, load_dataset, make_fold, save_dataset
from .errors import ContractError, DivergenceError, DJDAError, ShapeError, ValidationError
from .metrics import confusion, uar, war
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .trainer import EtaSchedule, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Dataset", "SynthSpec", "generate_synthetic", "load_dataset", "make_fold", "save_dataset",
    "ContractError", "DivergenceError", "DJDAError", "ShapeError", "ValidationError",
    "confusion", "uar", "war", "ModelConfig", "build_model", "load_checkpoint",
    "save_checkpoint", "EtaSchedule", "TrainConfig", "train",
]
