"""Video instance segmentation with a transformer that predicts whole instance sequences."""
from .config import ModelConfig, TrainConfig, load_config, parse_config, serialize_config
from .evaluation import EvalReport, InstanceResult, evaluate, postprocess
from .losses import LossWeights, hungarian_loss
from .matcher import hungarian, match
from .model import VisTR
from .synthdata import SynthConfig, generate_clip, generate_dataset

__all__ = [
    "EvalReport",
    "InstanceResult",
    "LossWeights",
    "ModelConfig",
    "SynthConfig",
    "TrainConfig",
    "VisTR",
    "evaluate",
    "generate_clip",
    "generate_dataset",
    "hungarian",
    "hungarian_loss",
    "load_config",
    "match",
    "parse_config",
    "postprocess",
    "serialize_config",
]
